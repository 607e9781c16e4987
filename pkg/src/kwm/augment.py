"""Training-time augmentation: waveform shift, resample and noise, then time/frequency masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .features import SAMPLE_RATE, MfccMatrix, Waveform


@dataclass
class AugmentConfig:
    enabled: bool = True
    shift_ms: tuple[float, ...] = (-100.0, 100.0)
    resample: tuple[float, ...] = (0.85, 1.15)
    noise_volume: float = 0.1
    noise_prob: float = 0.8
    n_time_masks: int = 2
    time_mask_max: int = 25
    n_freq_masks: int = 2
    freq_mask_max: int = 7
    rng_seed: int = 0
    clip_samples: int = SAMPLE_RATE

    def __post_init__(self):
        self.shift_ms = tuple(float(v) for v in self.shift_ms)
        self.resample = tuple(float(v) for v in self.resample)
        for name in ("shift_ms", "resample"):
            lo_hi = getattr(self, name)
            if len(lo_hi) != 2 or lo_hi[0] > lo_hi[1]:
                raise ConfigError(f"{name} must be an ordered (low, high) pair, got {lo_hi}")
        if self.resample[0] <= 0:
            raise ConfigError(f"resample rates must be positive, got {self.resample}")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ConfigError(f"noise_prob must lie in [0, 1], got {self.noise_prob}")
        if min(self.n_time_masks, self.time_mask_max, self.n_freq_masks, self.freq_mask_max) < 0:
            raise ConfigError("mask counts and sizes must be non-negative")
        if self.clip_samples <= 0:
            raise ConfigError(f"clip_samples must be positive, got {self.clip_samples}")


def example_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, example) so results do not depend on loading order."""
    return np.random.default_rng([seed, epoch, index])


# -- waveform primitives ------------------------------------------------------------

def time_shift(x: np.ndarray, n: int) -> np.ndarray:
    """Delay by ``n`` samples (advance if negative); the vacated region is zero."""
    out = np.zeros_like(x)
    if n >= 0:
        out[n:] = x[:x.size - n] if n < x.size else x[:0]
    else:
        out[:n] = x[-n:]
    return out


def resample_linear(x: np.ndarray, rate: float) -> np.ndarray:
    """Play back ``rate`` times faster: ``floor(len / rate)`` samples by linear interpolation."""
    n_out = int(x.size / rate)
    pos = np.arange(n_out) * rate
    return np.interp(pos, np.arange(x.size), x).astype(x.dtype)


def fix_length(x: np.ndarray, n: int) -> np.ndarray:
    """Centre-crop or symmetrically zero-pad to exactly ``n`` samples."""
    if x.size >= n:
        start = (x.size - n) // 2
        return x[start:start + n]
    before = (n - x.size) // 2
    return np.pad(x, (before, n - x.size - before))


def mix_noise(x: np.ndarray, noise: np.ndarray, volume: float) -> np.ndarray:
    return np.clip(x + volume * noise, -1.0, 1.0).astype(x.dtype)


@dataclass
class WaveformDraw:
    shift: int  # samples
    rate: float
    noise_index: int | None = None
    noise_offset: int = 0


def draw_waveform_params(noise_pool: list[Waveform], cfg: AugmentConfig, rng: np.random.Generator) -> WaveformDraw:
    shift = int(round(rng.uniform(*cfg.shift_ms) * SAMPLE_RATE / 1000))
    rate = float(rng.uniform(*cfg.resample))
    if rng.random() >= cfg.noise_prob:
        return WaveformDraw(shift, rate)
    if not noise_pool:
        raise ConfigError("noise_prob > 0 but the background-noise pool is empty")
    k = int(rng.integers(len(noise_pool)))
    spare = noise_pool[k].samples.size - cfg.clip_samples
    if spare < 0:
        raise DataError(f"noise clip {k} is shorter than {cfg.clip_samples} samples")
    return WaveformDraw(shift, rate, k, int(rng.integers(spare + 1)))


def apply_waveform_params(w: Waveform, noise_pool: list[Waveform], draw: WaveformDraw,
                          cfg: AugmentConfig) -> Waveform:
    x = fix_length(w.samples, cfg.clip_samples)
    x = time_shift(x, draw.shift)
    if draw.rate != 1.0:
        x = fix_length(resample_linear(x, draw.rate), cfg.clip_samples)
    if draw.noise_index is not None:
        noise = noise_pool[draw.noise_index].samples[draw.noise_offset:draw.noise_offset + cfg.clip_samples]
        x = mix_noise(x, noise, cfg.noise_volume)
    return Waveform(x, w.sample_rate)


def augment_waveform(w: Waveform, noise_pool: list[Waveform], cfg: AugmentConfig,
                     rng: np.random.Generator) -> Waveform:
    """Shift, then resample, then (with probability ``noise_prob``) add a noise crop."""
    if cfg.noise_prob > 0 and not noise_pool:
        raise ConfigError("noise_prob > 0 but the background-noise pool is empty")
    return apply_waveform_params(w, noise_pool, draw_waveform_params(noise_pool, cfg, rng), cfg)


# -- feature masks -------------------------------------------------------------------

def draw_masks(n: int, count: int, max_size: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """``count`` (start, width) pairs: width ~ U{0..max_size}, start ~ U{0..n - width}."""
    out = []
    for _ in range(count):
        width = int(rng.integers(0, min(max_size, n) + 1))
        out.append((int(rng.integers(0, n - width + 1)), width))
    return out


def apply_masks(coeffs: np.ndarray, time_masks, freq_masks) -> np.ndarray:
    out = coeffs.copy()
    for start, width in time_masks:
        out[:, start:start + width] = 0
    for start, height in freq_masks:
        out[start:start + height, :] = 0
    return out


def spec_augment(m: MfccMatrix, cfg: AugmentConfig, rng: np.random.Generator) -> MfccMatrix:
    n_coeffs, n_frames = m.coeffs.shape
    time_masks = draw_masks(n_frames, cfg.n_time_masks, cfg.time_mask_max, rng)
    freq_masks = draw_masks(n_coeffs, cfg.n_freq_masks, cfg.freq_mask_max, rng)
    return MfccMatrix(apply_masks(m.coeffs, time_masks, freq_masks), m.source_frames)
