"""Run one ablation axis on a Speech Commands tree and print a results table.

Thin wrapper over ``kwm ablate``; pass ``--dry-run`` to list the cells only.
"""

import argparse
import json
import sys
from contextlib import redirect_stdout
from io import StringIO

from kwm.cli import main as kwm_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--axis", required=True, choices=("patch", "token_pos", "directionality"))
    ap.add_argument("--config", required=True)
    ap.add_argument("--data")
    ap.add_argument("--out")
    ap.add_argument("--dry-run", action="store_true")
    args = ap.parse_args()
    argv = ["ablate", "--axis", args.axis, "--config", args.config]
    for flag in ("data", "out"):
        if getattr(args, flag):
            argv += [f"--{flag}", getattr(args, flag)]
    if args.dry_run:
        argv.append("--dry-run")

    buf = StringIO()
    with redirect_stdout(buf):
        code = kwm_main(argv)
    if code:
        sys.exit(code)
    result = json.loads(buf.getvalue())
    print(f"{'cell':<22}{'params':>10}{'test acc':>10}{'std':>7}")
    for cell in result["cells"]:
        acc = cell.get("test_accuracy")
        std = cell.get("test_accuracy_std")
        print(f"{cell['label']:<22}{cell['params']:>10,}"
              f"{'-' if acc is None else f'{acc:.2f}':>10}{'-' if std is None else f'{std:.2f}':>7}")


if __name__ == "__main__":
    main()
