"""Command-line entry point: ``kwm train|eval|features|params|ablate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import from_kv, read_kv, to_kv
from .data import DataConfig, Manifest, build_manifest, cached_split, read_manifest_csv, write_manifest_csv
from .errors import ConfigError, KwmError, UsageError
from .features import FeatureConfig, load_wav, mfcc, write_features_csv
from .harness import ABLATION_AXES, CorpusSource, ExperimentConfig, ablate, ablation_cells, evaluate, train
from .model import count_params, load_checkpoint

log = logging.getLogger("kwm")

MANIFEST_NAME = "manifest.csv"


def load_experiment(path, kv_overrides: dict[str, str] | None = None) -> tuple[ExperimentConfig, dict[str, str]]:
    kv = read_kv(path)
    kv.update(kv_overrides or {})
    return ExperimentConfig.from_kv(kv), kv


def resolve_data_dir(arg: str | None, data_cfg: DataConfig) -> Path:
    root = arg or data_cfg.root
    if not root:
        raise UsageError("no dataset directory: pass --data or set data.root in the config")
    return Path(root)


def resolve_manifest(root: Path, data_cfg: DataConfig, search=()) -> Manifest:
    """A ``manifest.csv`` in the data directory (or ``search`` dirs) wins; otherwise build one."""
    for d in (root, *search):
        if (Path(d) / MANIFEST_NAME).exists():
            log.info("using %s", Path(d) / MANIFEST_NAME)
            return read_manifest_csv(Path(d) / MANIFEST_NAME)
    return build_manifest(root, data_cfg.task, data_cfg.seed, data_cfg.unknown_ratio, data_cfg.silence_ratio,
                          data_cfg.use_list_files)


def fit_classes(exp: ExperimentConfig, kv: dict[str, str], manifest: Manifest) -> ExperimentConfig:
    """Default ``model.num_classes`` to the task size; an explicit mismatch is an error."""
    n = manifest.task.num_classes
    if "model.num_classes" in kv and exp.model.num_classes != n:
        raise ConfigError(f"model.num_classes = {exp.model.num_classes} but task {manifest.task.name} has {n} classes")
    return replace(exp, model=replace(exp.model, num_classes=n))


def _corpus(exp: ExperimentConfig, root: Path, manifest: Manifest, out: Path) -> CorpusSource:
    return CorpusSource(root, manifest, exp.augment if exp.augment.enabled else None, out, exp.features)


def cmd_train(args) -> dict:
    exp, kv = load_experiment(args.config)
    root = resolve_data_dir(args.data, exp.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = resolve_manifest(root, exp.data)
    write_manifest_csv(out / MANIFEST_NAME, manifest)
    exp = fit_classes(exp, kv, manifest)
    extra = {**to_kv(replace(exp.data, root=str(root.resolve())), "data"), **to_kv(exp.features, "features")}
    report = train(exp.model, exp.train, _corpus(exp, root, manifest, out), out,
                   exp.augment if exp.augment.enabled else None, extra_config=extra, label=args.label or "")
    return {"test_accuracy": report.test_accuracy, "test_accuracy_std": report.test_accuracy_std,
            "num_params": report.num_params, "wall_time": round(report.wall_time, 3),
            "report": str(out / "report.json")}


def cmd_eval(args) -> dict:
    model, kv = load_checkpoint(args.ckpt)
    data_cfg = from_kv(DataConfig, kv, "data", strict=False)
    feature_cfg = from_kv(FeatureConfig, kv, "features", strict=False)
    root = resolve_data_dir(args.data, data_cfg)
    ckpt_dir = Path(args.ckpt).resolve().parent
    manifest = resolve_manifest(root, data_cfg, search=(ckpt_dir,))
    if manifest.task.num_classes != model.cfg.num_classes:
        raise ConfigError(f"checkpoint has {model.cfg.num_classes} classes but task {manifest.task.name} "
                          f"has {manifest.task.num_classes}")
    if not manifest.split(args.split):
        raise UsageError(f"split {args.split!r} has no examples under {root}")
    ds = cached_split(manifest, args.split, root, Path(args.cache) if args.cache else ckpt_dir, feature_cfg)
    return {"split": args.split, "examples": len(ds), "accuracy": evaluate(model, ds)}


def cmd_features(args) -> dict:
    m = mfcc(load_wav(args.wav))
    write_features_csv(args.csv, m)
    return {"csv": str(args.csv), "shape": list(m.shape), "source_frames": m.source_frames}


def cmd_params(args) -> dict:
    exp, _ = load_experiment(args.config)
    return {"variant": exp.model.variant, "dim": exp.model.dim, "layers": exp.model.layers,
            "num_classes": exp.model.num_classes, "params": count_params(exp.model)}


def cmd_ablate(args) -> dict:
    exp, kv = load_experiment(args.config)
    cells = ablation_cells(args.axis, exp.model)
    if args.dry_run:
        return {"axis": args.axis, "cells": [{"label": label, "params": count_params(cfg)} for label, cfg in cells]}
    root = resolve_data_dir(args.data, exp.data)
    out = Path(args.out or f"ablation_{args.axis}")
    out.mkdir(parents=True, exist_ok=True)
    manifest = resolve_manifest(root, exp.data)
    write_manifest_csv(out / MANIFEST_NAME, manifest)
    exp = fit_classes(exp, kv, manifest)
    reports = ablate(args.axis, exp.model, exp.train, _corpus(exp, root, manifest, out), out,
                     exp.augment if exp.augment.enabled else None)
    return {"axis": args.axis, "cells": [{"label": r.label, "test_accuracy": r.test_accuracy,
                                          "test_accuracy_std": r.test_accuracy_std, "params": r.num_params}
                                         for r in reports]}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kwm", description="Keyword spotting with bidirectional selective SSMs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a key-value config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="dataset root (overrides data.root)")
    t.add_argument("--out", required=True)
    t.add_argument("--label", help="free-text label stored in the report")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on one split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", help="dataset root (defaults to the one recorded in the checkpoint)")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--cache", help="feature cache directory (defaults to the checkpoint's directory)")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("features", help="dump the 40x98 MFCC matrix of a WAV file as CSV")
    f.add_argument("--wav", required=True)
    f.add_argument("--csv", required=True)
    f.set_defaults(func=cmd_features)

    c = sub.add_parser("params", help="parameter count of the configured model")
    c.add_argument("--config", required=True)
    c.set_defaults(func=cmd_params)

    a = sub.add_parser("ablate", help="train every cell of an ablation axis")
    a.add_argument("--axis", required=True, choices=ABLATION_AXES)
    a.add_argument("--config", required=True)
    a.add_argument("--data")
    a.add_argument("--out")
    a.add_argument("--dry-run", action="store_true", help="list the cells and their sizes without training")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = args.func(args)
    except KwmError as exc:
        print(f"kwm {args.command}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"kwm {args.command}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
