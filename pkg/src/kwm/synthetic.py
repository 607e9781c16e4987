"""Synthetic audio for tests, smoke runs and demos when the real corpus is absent."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import NOISE_DIR, TARGET_WORDS, ArrayDataset
from .features import SAMPLE_RATE, Waveform, mfcc, write_wav


def class_tone(label: int, n_classes: int, rng: np.random.Generator, seconds: float = 1.0) -> np.ndarray:
    """A two-segment tone whose pitch pair identifies ``label``, with random jitter and noise."""
    n = int(SAMPLE_RATE * seconds)
    t = np.arange(n) / SAMPLE_RATE
    f1 = 300.0 + 3000.0 * label / max(n_classes, 1)
    f2 = 3500.0 - 2500.0 * label / max(n_classes, 1)
    split = n // 2 + int(rng.integers(-1600, 1601))
    freq = np.where(np.arange(n) < split, f1, f2) * rng.uniform(0.97, 1.03)
    phase = 2 * np.pi * np.cumsum(freq) / SAMPLE_RATE
    x = rng.uniform(0.2, 0.5) * np.sin(phase) + rng.normal(scale=0.02, size=n)
    fade = np.minimum(1.0, np.minimum(t, t[-1] - t) / 0.01)
    return np.clip(x * fade, -1, 1)


def tone_dataset(n: int, n_classes: int, seed: int = 0) -> ArrayDataset:
    """``n`` MFCC examples with balanced labels ``0..n_classes-1``."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    feats = np.stack([mfcc(Waveform(class_tone(int(y), n_classes, rng))).coeffs for y in labels])
    return ArrayDataset(feats, labels)


def make_speech_commands_tree(root, words=TARGET_WORDS + ("bed", "cat", "happy"), speakers: int = 20,
                              clips_per_speaker: int = 1, noise_seconds: float = 12.0, seed: int = 0,
                              seconds: float = 0.25) -> Path:
    """Write a miniature corpus with the Speech Commands layout.

    Files are named ``<speaker>_nohash_<k>.wav``; clips are short tones so the
    tree stays small. Returns the root path.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    all_words = sorted(words)
    for wi, word in enumerate(all_words):
        d = root / word
        d.mkdir(parents=True, exist_ok=True)
        for s in range(speakers):
            for k in range(clips_per_speaker):
                write_wav(d / f"{s:08x}_nohash_{k}.wav", class_tone(wi, len(all_words), rng, seconds))
    noise = root / NOISE_DIR
    noise.mkdir(parents=True, exist_ok=True)
    for name in ("white_noise", "pink_ish"):
        x = rng.normal(scale=0.2, size=int(SAMPLE_RATE * noise_seconds))
        if name == "pink_ish":
            x = np.cumsum(x) * 0.05
            x -= x.mean()
        write_wav(noise / f"{name}.wav", np.clip(x, -1, 1))
    return root
