"""Speech Commands ingestion: label tasks, split manifests, silence/unknown synthesis, batching."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .augment import AugmentConfig, augment_waveform, example_rng, spec_augment
from .errors import ConfigError, DataError, FormatError
from .features import SAMPLE_RATE, FeatureConfig, Waveform, load_wav, mfcc

log = logging.getLogger(__name__)

TARGET_WORDS = ("up", "down", "left", "right", "yes", "no", "on", "off", "go", "stop")
SILENCE, UNKNOWN = "silence", "unknown"
NOISE_DIR = "_background_noise_"
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
TASK_NAMES = ("V1-12", "V1-30", "V2-12", "V2-35")
KEYWORDS_PREFIX = "keywords:"
MAX_SKIP_FRACTION = 0.01
_HASH_BUCKETS = 2**27 - 1


@dataclass
class DataConfig:
    task: str = "V2-12"
    root: str | None = None  # dataset directory; the CLI's --data overrides it
    seed: int = 0
    unknown_ratio: float = 1.0  # unknown examples per split, as a multiple of the mean target-class count
    silence_ratio: float = 1.0
    use_list_files: bool = False

    def __post_init__(self):
        LabelTask.from_name(self.task, words=() if self.task.strip().upper() in ("V1-30", "V2-35") else None,
                            check_count=False)
        if self.unknown_ratio < 0 or self.silence_ratio < 0:
            raise ConfigError("data.unknown_ratio and data.silence_ratio must be non-negative")


@dataclass(frozen=True)
class LabelTask:
    name: str
    classes: tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def is_keyword_task(self) -> bool:
        """Keyword tasks fold non-target words into ``unknown`` and synthesize ``silence``."""
        return self.name.endswith("-12") or self.name.startswith(KEYWORDS_PREFIX)

    @property
    def targets(self) -> tuple[str, ...]:
        return tuple(c for c in self.classes if c not in (SILENCE, UNKNOWN)) if self.is_keyword_task else self.classes

    @classmethod
    def from_name(cls, name: str, words=None, check_count: bool = True) -> LabelTask:
        """Resolve a task name.

        12-way lists are fixed; 30/35-way lists are the sorted word folders in
        ``words``; ``keywords:yes,no`` is a custom keyword task with the given
        targets plus ``silence`` and ``unknown``.
        """
        if name.strip().lower().startswith(KEYWORDS_PREFIX):
            targets = tuple(w.strip() for w in name.strip()[len(KEYWORDS_PREFIX):].split(",") if w.strip())
            if not targets or len(set(targets)) != len(targets) or {SILENCE, UNKNOWN} & set(targets):
                raise ConfigError(f"task {name!r} needs distinct target words other than silence/unknown")
            return cls(KEYWORDS_PREFIX + ",".join(targets), targets + (SILENCE, UNKNOWN))
        key = name.strip().upper()
        if key not in TASK_NAMES:
            raise ConfigError(f"unknown task {name!r}; expected one of {TASK_NAMES} or {KEYWORDS_PREFIX}w1,w2,...")
        if key.endswith("-12"):
            return cls(key, TARGET_WORDS + (SILENCE, UNKNOWN))
        if words is None:
            raise ConfigError(f"task {key} needs the dataset's word list")
        expected = int(key.split("-")[1])
        words = tuple(sorted(words))
        if check_count and len(words) != expected:
            raise DataError(f"task {key} expects {expected} word folders, found {len(words)}")
        return cls(key, words)

    def index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise DataError(f"label {label!r} is not in task {self.name}") from None


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the dataset root; silence crops are "<noise file>#<start sample>"
    label: int
    split: str


@dataclass
class Manifest:
    task: LabelTask
    entries: list[ManifestEntry] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {name!r}")
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, Counter]:
        return {s: Counter(self.task.classes[e.label] for e in self.split(s)) for s in SPLITS}


def speaker_id(filename: str) -> str:
    """Speaker prefix of a Speech Commands file name (text before the first underscore)."""
    return Path(filename).name.split("_", 1)[0]


def split_of(filename: str, val_pct: float = 10.0, test_pct: float = 10.0) -> str:
    """Stable speaker-level bucket, following the dataset's reference ``which_set`` recipe."""
    h = int(hashlib.sha1(speaker_id(filename).encode()).hexdigest(), 16)
    pct = (h % (_HASH_BUCKETS + 1)) * (100.0 / _HASH_BUCKETS)
    if pct < val_pct:
        return "val"
    if pct < val_pct + test_pct:
        return "test"
    return "train"


def _read_list(path: Path) -> set[str]:
    return {line.strip() for line in path.read_text().splitlines() if line.strip()}


def scan_words(root) -> dict[str, list[str]]:
    """Word folder -> sorted relative wav paths. Folders starting with ``_`` are not words."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    words = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("_")):
        wavs = sorted(f"{d.name}/{f.name}" for f in d.glob("*.wav"))
        if wavs:
            words[d.name] = wavs
    if not words:
        raise DataError(f"no word folders with .wav files under {root}")
    return words


def noise_region(n_samples: int, split: str) -> tuple[int, int]:
    """Sample range of a background-noise clip reserved for ``split`` (80:10:10 by time)."""
    edges = np.round(np.cumsum((0.0,) + SPLIT_FRACTIONS) * n_samples).astype(int)
    k = SPLITS.index(split)
    return int(edges[k]), int(edges[k + 1])


def _noise_files(root: Path) -> list[str]:
    d = root / NOISE_DIR
    files = sorted(f"{NOISE_DIR}/{f.name}" for f in d.glob("*.wav")) if d.is_dir() else []
    return files


def build_manifest(root, task="V2-12", seed: int = 0, unknown_ratio: float = 1.0,
                   silence_ratio: float = 1.0, use_list_files: bool = False) -> Manifest:
    """Assign every clip to a split and a label id.

    Splits come from a stable hash of the speaker id, or from
    ``validation_list.txt``/``testing_list.txt`` when ``use_list_files`` is set
    and both are present. For 12-way tasks, ``unknown`` is downsampled and
    ``silence`` synthesized per split to ``ratio * mean target-class count``.
    """
    root = Path(root)
    words = scan_words(root)
    if isinstance(task, str):
        task = LabelTask.from_name(task, words)
    rng = np.random.default_rng(seed)

    lists = None
    if use_list_files and (root / "validation_list.txt").exists() and (root / "testing_list.txt").exists():
        lists = (_read_list(root / "validation_list.txt"), _read_list(root / "testing_list.txt"))

    def assign(rel: str) -> str:
        if lists is None:
            return split_of(rel)
        return "val" if rel in lists[0] else "test" if rel in lists[1] else "train"

    entries: list[ManifestEntry] = []
    if not task.is_keyword_task:
        missing = set(task.classes) - set(words)
        if missing:
            raise DataError(f"word folders missing for task {task.name}: {sorted(missing)}")
        for w in task.classes:
            entries += [ManifestEntry(rel, task.index(w), assign(rel)) for rel in words[w]]
        return Manifest(task, entries)

    targets = task.targets
    missing = set(targets) - set(words)
    if missing:
        raise DataError(f"target word folders missing: {sorted(missing)}")
    noise = _noise_files(root)
    if not noise:
        raise DataError(f"{root / NOISE_DIR} is missing or empty; it is needed to synthesize '{SILENCE}'")
    noise_lengths = {rel: load_wav(root / rel).samples.size for rel in noise}
    unknown_id, silence_id = task.index(UNKNOWN), task.index(SILENCE)

    for split in SPLITS:
        target = [ManifestEntry(rel, task.index(w), split) for w in targets for rel in words[w]
                  if assign(rel) == split]
        per_class = len(target) / len(targets)
        others = [ManifestEntry(rel, unknown_id, split) for w in sorted(set(words) - set(targets))
                  for rel in words[w] if assign(rel) == split]
        n_unknown = min(len(others), int(round(unknown_ratio * per_class)))
        keep = sorted(rng.choice(len(others), size=n_unknown, replace=False)) if n_unknown else []
        entries += target + [others[i] for i in keep]

        n_silence = int(round(silence_ratio * per_class))
        usable = []
        for rel in noise:
            lo, hi = noise_region(noise_lengths[rel], split)
            if hi - lo >= SAMPLE_RATE:
                usable.append((rel, lo, hi))
        if n_silence and not usable:
            raise DataError(f"no background-noise clip has 1 s reserved for the {split} split")
        for _ in range(n_silence):
            rel, lo, hi = usable[int(rng.integers(len(usable)))]
            start = int(rng.integers(lo, hi - SAMPLE_RATE + 1))
            entries.append(ManifestEntry(f"{rel}#{start}", silence_id, split))
    return Manifest(task, entries)


# -- manifest CSV -------------------------------------------------------------------

def write_manifest_csv(path, manifest: Manifest) -> None:
    """``path,label,split`` rows; the task is recorded in a sidecar ``<path>.task.json``."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "split"])
        for e in manifest.entries:
            w.writerow([e.path, e.label, e.split])
    sidecar = path.with_name(path.name + ".task.json")
    sidecar.write_text(json.dumps({"name": manifest.task.name, "classes": list(manifest.task.classes)}, indent=1))


def read_manifest_csv(path, task: LabelTask | None = None) -> Manifest:
    path = Path(path)
    if task is None:
        sidecar = path.with_name(path.name + ".task.json")
        if not sidecar.exists():
            raise DataError(f"{path}: no task given and no sidecar {sidecar.name}")
        meta = json.loads(sidecar.read_text())
        task = LabelTask(meta["name"], tuple(meta["classes"]))
    entries = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != ["path", "label", "split"]:
            raise FormatError(f"{path}: expected header path,label,split, got {header}")
        for lineno, row in enumerate(rows, 2):
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            rel, label, split = row
            try:
                label_id = int(label)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: label {label!r} is not an integer id") from None
            if not 0 <= label_id < task.num_classes:
                raise DataError(f"{path}:{lineno}: label id {label_id} outside 0..{task.num_classes - 1}")
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            entries.append(ManifestEntry(rel, label_id, split))
    return Manifest(task, entries)


# -- examples -----------------------------------------------------------------------

_OFFSET = re.compile(r"^(.*)#(\d+)$")


def load_example(root, rel: str) -> Waveform:
    """Decode one manifest path; ``file#start`` yields a 1 s crop starting at sample ``start``."""
    m = _OFFSET.match(rel)
    if m is None:
        return load_wav(Path(root) / rel)
    w = load_wav(Path(root) / m.group(1))
    start = int(m.group(2))
    crop = w.samples[start:start + SAMPLE_RATE]
    if crop.size < SAMPLE_RATE:
        raise DataError(f"{rel}: crop runs past the end of a {w.samples.size}-sample clip")
    return Waveform(crop, w.sample_rate)


def load_noise_pool(root, split: str = "train") -> list[Waveform]:
    """The ``split`` region of every background-noise clip, for augmentation."""
    pool = []
    for rel in _noise_files(Path(root)):
        w = load_wav(Path(root) / rel)
        lo, hi = noise_region(w.samples.size, split)
        if hi - lo >= SAMPLE_RATE:
            pool.append(Waveform(w.samples[lo:hi], w.sample_rate))
    return pool


def featurize(w: Waveform, augment: AugmentConfig | None = None, noise_pool=(), rng=None,
              feature_cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Waveform -> ``[40, 98]`` float32, augmented when ``augment`` is enabled."""
    if augment is not None and augment.enabled:
        w = augment_waveform(w, list(noise_pool), augment, rng)
        return spec_augment(mfcc(w, feature_cfg), augment, rng).coeffs
    return mfcc(w, feature_cfg).coeffs


@dataclass
class Batch:
    features: np.ndarray  # [B, 40, 98] float32, C-contiguous
    labels: np.ndarray  # [B] int64
    indices: np.ndarray  # positions within the split


def epoch_order(n: int, split: str, shuffle_seed: int, epoch: int) -> np.ndarray:
    if split != "train":
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


class BatchStream:
    """Iterable of :class:`Batch` over one split of a manifest.

    Train batches are shuffled per epoch and augmented; val/test keep manifest
    order and raw features. Unreadable files are skipped and counted in
    ``skipped``; more than 1% skips raises :class:`DataError`.
    """

    def __init__(self, manifest: Manifest, split: str, batch_size: int, shuffle_seed: int = 0, epoch: int = 0,
                 *, root=None, augment: AugmentConfig | None = None, noise_pool=(),
                 feature_cfg: FeatureConfig = FeatureConfig()):
        if batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {batch_size}")
        self.entries = manifest.split(split)
        self.split = split
        self.batch_size = batch_size
        self.shuffle_seed = shuffle_seed
        self.epoch = epoch
        self.root = root
        self.augment = augment if split == "train" else None
        self.noise_pool = list(noise_pool)
        self.feature_cfg = feature_cfg
        self.skipped = 0

    def __len__(self) -> int:
        return -(-len(self.entries) // self.batch_size)

    def _features(self, i: int) -> np.ndarray:
        w = load_example(self.root, self.entries[i].path)
        seed = self.augment.rng_seed if self.augment is not None else 0
        return featurize(w, self.augment, self.noise_pool, example_rng(seed, self.epoch, i), self.feature_cfg)

    def __iter__(self) -> Iterator[Batch]:
        self.skipped = 0
        order = epoch_order(len(self.entries), self.split, self.shuffle_seed, self.epoch)
        limit = MAX_SKIP_FRACTION * len(self.entries)
        for start in range(0, len(order), self.batch_size):
            feats, labels, idx = [], [], []
            for i in order[start:start + self.batch_size]:
                try:
                    feats.append(self._features(int(i)))
                except (DataError, OSError) as exc:
                    self.skipped += 1
                    log.warning("skipping %s: %s", self.entries[i].path, exc)
                    if self.skipped > limit:
                        raise DataError(f"{self.skipped} unreadable files in split {self.split!r} "
                                        f"exceeds {MAX_SKIP_FRACTION:.0%} of {len(self.entries)}") from exc
                    continue
                labels.append(self.entries[i].label)
                idx.append(int(i))
            if feats:
                yield Batch(np.ascontiguousarray(np.stack(feats), dtype=np.float32),
                            np.asarray(labels, dtype=np.int64), np.asarray(idx, dtype=np.int64))


def batches(manifest: Manifest, split: str, batch_size: int, shuffle_seed: int = 0, epoch: int = 0,
            **kwargs) -> BatchStream:
    return BatchStream(manifest, split, batch_size, shuffle_seed, epoch, **kwargs)


# -- in-memory data and caching --------------------------------------------------------

@dataclass
class ArrayDataset:
    """Pre-computed features, e.g. a synthetic set or a cached split."""

    features: np.ndarray  # [N, 40, 98]
    labels: np.ndarray  # [N]

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 3 or len(self.features) != len(self.labels):
            raise DataError(f"features {self.features.shape} and labels {self.labels.shape} do not line up")

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0) -> Iterator[Batch]:
        n = len(self)
        order = np.arange(n) if shuffle_seed is None else epoch_order(n, "train", shuffle_seed, epoch)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield Batch(np.ascontiguousarray(self.features[idx]), self.labels[idx], idx)


def cache_key(manifest: Manifest, split: str, root, feature_cfg: FeatureConfig = FeatureConfig()) -> str:
    h = hashlib.sha1()
    h.update(json.dumps(asdict(feature_cfg), sort_keys=True).encode())
    h.update(str(Path(root).resolve()).encode())
    for e in manifest.split(split):
        h.update(f"{e.path}\t{e.label}\n".encode())
    return h.hexdigest()[:16]


def cached_split(manifest: Manifest, split: str, root, cache_dir,
                 feature_cfg: FeatureConfig = FeatureConfig()) -> ArrayDataset:
    """Un-augmented features of one split, computed once and stored as ``cache/<split>-<hash>.npz``."""
    path = Path(cache_dir) / "cache" / f"{split}-{cache_key(manifest, split, root, feature_cfg)}.npz"
    if path.exists():
        with np.load(path) as z:
            return ArrayDataset(z["features"], z["labels"])
    stream = BatchStream(manifest, split, 256, root=root, feature_cfg=feature_cfg)
    parts = list(stream)
    if not parts:
        raise DataError(f"split {split!r} is empty")
    ds = ArrayDataset(np.concatenate([b.features for b in parts]), np.concatenate([b.labels for b in parts]))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, features=ds.features, labels=ds.labels)
    tmp.replace(path)
    return ds
