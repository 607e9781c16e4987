"""Print parameter counts for every variant x width x depth cell next to the published sizes."""

import argparse

from kwm.model import ModelConfig, count_params

# (variant, dim, layers) -> published size in millions
PUBLISHED = {
    ("KWM", 192, 12): 3.4, ("KWM", 192, 10): 2.9, ("KWM", 192, 8): 2.3, ("KWM", 192, 6): 1.7,
    ("KWM", 128, 12): 1.6, ("KWM", 128, 10): 1.4, ("KWM", 128, 8): 1.1, ("KWM", 128, 6): 0.8,
    ("KWM", 64, 12): 0.5, ("KWM", 64, 10): 0.4, ("KWM", 64, 8): 0.3, ("KWM", 64, 6): 0.2,
    ("KWM-T", 192, 12): 5.2, ("KWM-T", 192, 10): 4.3, ("KWM-T", 192, 8): 3.5, ("KWM-T", 192, 6): 2.6,
    ("KWM-T", 128, 12): 2.4, ("KWM-T", 128, 10): 2.0, ("KWM-T", 128, 8): 1.6, ("KWM-T", 128, 6): 1.2,
    ("KWM-T", 64, 12): 0.7, ("KWM-T", 64, 10): 0.6, ("KWM-T", 64, 8): 0.5, ("KWM-T", 64, 6): 0.4,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--classes", type=int, default=35)
    args = ap.parse_args()
    print(f"{'cell':<16}{'params':>10}{'published':>11}{'rel.dev':>9}")
    for (variant, dim, layers), target in PUBLISHED.items():
        n = count_params(ModelConfig(dim=dim, layers=layers, variant=variant, num_classes=args.classes))
        dev = n / (target * 1e6) - 1
        cell = f"{variant}-{dim}-L{layers}"
        print(f"{cell:<16}{n:>10,}{target:>10.1f}M{dev:>+9.1%}")


if __name__ == "__main__":
    main()
