"""Training loop, evaluation, reports and the ablation runner."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .augment import AugmentConfig
from .config import dump_kv, from_kv, to_kv
from .data import ArrayDataset, Batch, BatchStream, DataConfig, Manifest, cached_split, load_noise_pool
from .errors import ConfigError, NumericDomainError, UsageError
from .features import FeatureConfig
from .model import KwmModel, ModelConfig, save_checkpoint
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

CKPT_NAME = "ckpt_best.kwm"
NO_DECAY_SUFFIXES = ("bias", "gain", "A_log", ".D")
NO_DECAY_NAMES = ("cls_token", "pos_embed")


@dataclass
class TrainConfig:
    epochs: int = 140
    batch_size: int = 128
    lr0: float = 1e-3
    warmup_epochs: int = 10
    weight_decay: float = 0.1
    label_smoothing: float = 0.1
    seed: int = 0
    runs: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None  # global-norm clipping, off by default
    max_steps: int | None = None  # stop early after this many optimizer steps
    threads: int = 1  # BLAS threads; 1 keeps runs bit-reproducible

    def __post_init__(self):
        for name in ("epochs", "batch_size", "runs", "threads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.lr0 <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("train.lr0 and train.eps must be positive and weight_decay non-negative")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"train.warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f"train.label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1 and train.beta2 must lie in [0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"train.grad_clip must be positive when set, got {self.grad_clip}")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigError(f"train.max_steps must be positive when set, got {self.max_steps}")


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr0`` (reached on the last warmup step), then cosine decay to 0."""
    if step < 0:
        raise UsageError(f"step must be non-negative, got {step}")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.lr0 * (step + 1) / warm
    progress = min(1.0, (step - warm) / max(1, total - warm))
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only."""
    return not (name.endswith(NO_DECAY_SUFFIXES) or name in NO_DECAY_NAMES)


class AdamW:
    """Adam with decoupled weight decay: ``p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)``."""

    def __init__(self, params: list[Parameter], weight_decay: float = 0.1, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.decay_mask = [decays(p.name) for p in self.params]

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> AdamW:
        return cls(params, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.eps)

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericDomainError(f"non-finite gradient in parameter {p.name}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay_mask):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if decay and self.weight_decay:
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        T.zero_grad(self.params)


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = np.float32(max_norm / (total + 1e-12))
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


# -- data sources ------------------------------------------------------------------

class DataSource(Protocol):
    def train_batches(self, batch_size: int, seed: int, epoch: int) -> Iterable[Batch]: ...

    def num_train(self) -> int: ...

    def eval_set(self, split: str) -> ArrayDataset | None: ...


@dataclass
class ArraySource:
    """In-memory splits; training batches are shuffled per epoch, never augmented."""

    train: ArrayDataset
    val: ArrayDataset | None = None
    test: ArrayDataset | None = None
    shuffle: bool = True

    def train_batches(self, batch_size, seed, epoch):
        return self.train.batches(batch_size, seed if self.shuffle else None, epoch)

    def num_train(self):
        return len(self.train)

    def eval_set(self, split):
        return {"train": self.train, "val": self.val, "test": self.test}[split]


@dataclass
class CorpusSource:
    """A manifest over a dataset directory: augmented training stream, cached raw features for val/test."""

    root: Path
    manifest: Manifest
    augment: AugmentConfig | None = None
    cache_dir: Path | None = None
    feature_cfg: FeatureConfig = field(default_factory=FeatureConfig)
    noise_pool: list = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.augment is not None and self.augment.enabled and not self.noise_pool:
            self.noise_pool = load_noise_pool(self.root, "train")
        self._eval: dict[str, ArrayDataset] = {}

    def train_batches(self, batch_size, seed, epoch):
        return BatchStream(self.manifest, "train", batch_size, seed, epoch, root=self.root, augment=self.augment,
                           noise_pool=self.noise_pool, feature_cfg=self.feature_cfg)

    def num_train(self):
        return len(self.manifest.split("train"))

    def eval_set(self, split):
        if not self.manifest.split(split):
            return None
        if split not in self._eval:
            cache = self.cache_dir if self.cache_dir is not None else self.root
            self._eval[split] = cached_split(self.manifest, split, self.root, cache, self.feature_cfg)
        return self._eval[split]


@dataclass
class ExperimentConfig:
    """Every section of a config file: ``model.*``, ``train.*``, ``augment.*``, ``data.*``, ``features.*``."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)

    SECTIONS = ("model", "train", "augment", "data", "features")

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> ExperimentConfig:
        unknown = sorted(k for k in kv if k.split(".", 1)[0] not in cls.SECTIONS or "." not in k)
        if unknown:
            raise ConfigError(f"config keys outside the sections {cls.SECTIONS}: {unknown}")
        types = {"model": ModelConfig, "train": TrainConfig, "augment": AugmentConfig, "data": DataConfig,
                 "features": FeatureConfig}
        return cls(**{name: from_kv(tp, kv, name) for name, tp in types.items()})

    def to_kv(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for name in self.SECTIONS:
            out.update(to_kv(getattr(self, name), name))
        return out


# -- reports -----------------------------------------------------------------------

@dataclass
class EpochRecord:
    run: int
    epoch: int
    steps: int
    train_loss: float
    train_acc: float
    val_acc: float | None
    lr: float
    seconds: float


@dataclass
class RunReport:
    label: str = ""
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[list[float]] = field(default_factory=list)  # one list per run
    run_test_accuracies: list[float] = field(default_factory=list)
    run_best_val_accuracies: list[float] = field(default_factory=list)
    test_accuracy: float | None = None  # mean over runs
    test_accuracy_std: float | None = None
    num_params: int = 0
    wall_time: float = 0.0
    config_hash: str = ""

    def __post_init__(self):
        accs = [*self.run_test_accuracies, *self.run_best_val_accuracies]
        accs += [r.train_acc for r in self.epochs] + [r.val_acc for r in self.epochs if r.val_acc is not None]
        if any(not 0.0 <= a <= 100.0 for a in accs):
            raise ValueError("accuracies must lie in [0, 100]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = [asdict(r) for r in self.epochs]
        return d

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        """``<stem>.json`` with everything and ``<stem>_epochs.csv`` with one row per epoch."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        js, cs = out / f"{stem}.json", out / f"{stem}_epochs.csv"
        js.write_text(json.dumps(self.to_dict(), indent=1))
        with open(cs, "w", newline="") as fh:
            w = csv.writer(fh)
            names = [f.name for f in fields(EpochRecord)]
            w.writerow(names)
            for r in self.epochs:
                w.writerow(["" if getattr(r, n) is None else getattr(r, n) for n in names])
        return js, cs

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        d = dict(d)
        d["epochs"] = [EpochRecord(**r) for r in d.get("epochs", [])]
        return cls(**d)


def config_text(model_cfg: ModelConfig, train_cfg: TrainConfig, augment: AugmentConfig | None = None,
                extra: dict | None = None) -> str:
    items = {**to_kv(model_cfg, "model"), **to_kv(train_cfg, "train")}
    if augment is not None:
        items.update(to_kv(augment, "augment"))
    items.update(extra or {})
    return dump_kv(items)


def config_hash(*args, **kwargs) -> str:
    return hashlib.sha1(config_text(*args, **kwargs).encode()).hexdigest()[:12]


# -- evaluation --------------------------------------------------------------------

def predict(model: KwmModel, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(features), batch_size):
            out.append(np.argmax(model(Tensor(features[start:start + batch_size])).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model, data, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent over an :class:`ArrayDataset` or an iterable of batches.

    ``model`` is anything mapping a feature batch to logits.
    """
    correct = total = 0
    if isinstance(data, ArrayDataset):
        data = data.batches(batch_size)
    with T.no_grad():
        for batch in data:
            logits = model(Tensor(batch.features))
            logits = getattr(logits, "data", logits)
            correct += int(np.sum(np.argmax(logits, axis=1) == batch.labels))
            total += len(batch.labels)
    if total == 0:
        raise UsageError("cannot evaluate on an empty split")
    return 100.0 * correct / total


# -- training ----------------------------------------------------------------------

def _train_one(model_cfg: ModelConfig, cfg: TrainConfig, data: DataSource, run: int, out_dir: Path | None,
               report: RunReport, ckpt_extra: dict) -> tuple[float | None, float | None]:
    seed = cfg.seed + run
    model = KwmModel(replace(model_cfg, seed=seed))
    opt = AdamW.from_config(model.parameters(), cfg)
    spe = -(-data.num_train() // cfg.batch_size)
    val_set, test_set = data.eval_set("val"), data.eval_set("test")
    losses: list[float] = []
    report.step_losses.append(losses)
    best_val, best_state = -1.0, None
    ckpt = out_dir / (CKPT_NAME if cfg.runs == 1 else f"ckpt_best_run{run}.kwm") if out_dir else None
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        ep_loss, ep_correct, ep_seen = 0.0, 0, 0
        lr = 0.0
        for batch in data.train_batches(cfg.batch_size, seed, epoch):
            lr = lr_schedule(step, spe, cfg)
            opt.zero_grad()
            try:
                logits = model(Tensor(batch.features))
                loss = T.cross_entropy_label_smoothed(logits, batch.labels, cfg.label_smoothing)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericDomainError(f"loss is {value}")
                T.backward(loss)
                if cfg.grad_clip is not None:
                    clip_grad_norm(model.parameters(), cfg.grad_clip)
                opt.step(lr)
            except NumericDomainError as exc:
                kept = ckpt if best_state is not None else "none"
                raise NumericDomainError(f"training diverged at step {step} (run {run}): {exc}; "
                                         f"last good checkpoint: {kept}") from exc
            losses.append(value)
            n = len(batch.labels)
            ep_loss += value * n
            ep_seen += n
            ep_correct += int(np.sum(np.argmax(logits.data, axis=1) == batch.labels))
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        val_acc = evaluate(model, val_set) if val_set is not None and len(val_set) else None
        report.epochs.append(EpochRecord(run, epoch, step, ep_loss / max(ep_seen, 1),
                                         100.0 * ep_correct / max(ep_seen, 1), val_acc, lr,
                                         time.perf_counter() - t0))
        log.info("run %d epoch %d step %d loss %.4f train_acc %.2f val_acc %s", run, epoch, step,
                 ep_loss / max(ep_seen, 1), 100.0 * ep_correct / max(ep_seen, 1), val_acc)
        score = val_acc if val_acc is not None else 100.0 * ep_correct / max(ep_seen, 1)
        if score > best_val:
            best_val, best_state = score, model.state_dict()
            if ckpt is not None:
                save_checkpoint(ckpt, model, {**ckpt_extra, "train.best_epoch": epoch})
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    report.num_params = model.num_params()
    model.load_state_dict(best_state)
    test_acc = evaluate(model, test_set) if test_set is not None and len(test_set) else None
    return test_acc, (best_val if val_set is not None else None)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, data: DataSource, out_dir=None,
          augment: AugmentConfig | None = None, extra_config: dict | None = None, label: str = "") -> RunReport:
    """Train ``train_cfg.runs`` seeds and return one report with per-run curves and averaged test accuracy.

    The best model by validation accuracy (train accuracy when there is no
    validation split) is checkpointed and used for the test score.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    extra = {**to_kv(train_cfg, "train"), **(to_kv(augment, "augment") if augment else {}), **(extra_config or {})}
    report = RunReport(label=label, config_hash=config_hash(model_cfg, train_cfg, augment, extra_config))
    t0 = time.perf_counter()
    with threadpool_limits(limits=train_cfg.threads):
        for run in range(train_cfg.runs):
            test_acc, best_val = _train_one(model_cfg, train_cfg, data, run, out, report, extra)
            if test_acc is not None:
                report.run_test_accuracies.append(test_acc)
            if best_val is not None:
                report.run_best_val_accuracies.append(best_val)
    report.wall_time = time.perf_counter() - t0
    if report.run_test_accuracies:
        report.test_accuracy = float(np.mean(report.run_test_accuracies))
        report.test_accuracy_std = float(np.std(report.run_test_accuracies))
    report.__post_init__()
    if out is not None:
        report.write(out)
    return report


# -- ablations ---------------------------------------------------------------------

PATCH_SWEEP = ((40, 1), (1, 98), (8, 2), (4, 7), (10, 14), (40, 2), (20, 1), (2, 49))
ABLATION_AXES = ("patch", "token_pos", "directionality")


def ablation_cells(axis: str, base: ModelConfig, patches=PATCH_SWEEP) -> list[tuple[str, ModelConfig]]:
    """``(label, config)`` for every cell of a sweep; all cells are validated before any is run."""
    if axis == "patch":
        return [(f"patch={f}x{t}", replace(base, patch=(f, t))) for f, t in patches]
    if axis == "token_pos":
        return [(f"token_pos={p}", replace(base, class_token_pos=p)) for p in ("mid", "head", "end")]
    if axis == "directionality":
        return [(f"mode={m}", replace(base, mode=m)) for m in ("Bi-Bi", "Fo-Bi", "Fo-Fo")]
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def ablate(axis: str, base: ModelConfig, train_cfg: TrainConfig, data: DataSource, out_dir=None,
           augment: AugmentConfig | None = None, patches=PATCH_SWEEP) -> list[RunReport]:
    cells = ablation_cells(axis, base, patches)
    reports = []
    for label, cfg in cells:
        sub = Path(out_dir) / label.replace("=", "_") if out_dir is not None else None
        reports.append(train(cfg, train_cfg, data, sub, augment, label=label))
    if out_dir is not None:
        summary = [{"label": r.label, "test_accuracy": r.test_accuracy, "test_accuracy_std": r.test_accuracy_std,
                    "num_params": r.num_params} for r in reports]
        (Path(out_dir) / f"ablation_{axis}.json").write_text(json.dumps(summary, indent=1))
    return reports

