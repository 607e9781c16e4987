"""Overfit 128 synthetic tone examples with a small model and report the loss curve.

Same setup as the smoke-training acceptance check; useful for timing a machine.
"""

import argparse
import json
import math

from kwm.harness import ArraySource, TrainConfig, train
from kwm.model import ModelConfig
from kwm.synthetic import tone_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--classes", type=int, default=12)
    ap.add_argument("--examples", type=int, default=128)
    ap.add_argument("--epochs", type=int, default=75)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="directory for report.json and the checkpoint")
    args = ap.parse_args()

    ds = tone_dataset(args.examples, args.classes, seed=args.seed)
    cfg = ModelConfig(dim=args.dim, layers=args.layers, num_classes=args.classes)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=32, lr0=1e-3, warmup_epochs=5, runs=1, seed=args.seed)
    report = train(cfg, tcfg, ArraySource(ds, val=ds, test=ds), args.out, label="smoke")
    losses = report.step_losses[0]
    hit = next((r.steps for r in report.epochs if r.val_acc == 100.0), None)
    print(json.dumps({
        "steps": len(losses), "initial_loss": losses[0], "ln_classes": math.log(args.classes),
        "final_loss": losses[-1], "first_step_at_100pct": hit, "train_accuracy": report.test_accuracy,
        "seconds": round(report.wall_time, 1),
    }, indent=1))


if __name__ == "__main__":
    main()
