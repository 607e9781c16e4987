"""WAV decoding and the 40 x 98 MFCC front end."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.signal import get_window

from .errors import DataError, FormatError

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0
_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class FeatureConfig:
    """Front-end constants. Changing any of them changes every cached feature."""

    sample_rate: int = SAMPLE_RATE
    win_length: int = 480  # 30 ms
    hop_length: int = 160  # 10 ms
    n_fft: int = 512
    n_mels: int = 40
    n_mfcc: int = 40
    f_min: float = 20.0
    f_max: float = 8000.0
    log_floor: float = 1e-10
    n_frames: int = 98


@dataclass
class Waveform:
    samples: np.ndarray  # float32 in [-1, 1]
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32).reshape(-1)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MfccMatrix:
    coeffs: np.ndarray  # float32 [n_mfcc, n_frames]
    source_frames: int  # frames computed before padding/truncation

    @property
    def shape(self) -> tuple[int, int]:
        return self.coeffs.shape


# -- WAV I/O ------------------------------------------------------------------------

def parse_wav(blob: bytes, name: str = "<bytes>") -> Waveform:
    """Decode a RIFF/WAVE PCM 16-bit mono byte string.

    Unknown chunks are skipped. Any structural problem raises
    :class:`FormatError` carrying the byte offset where decoding stopped.
    """
    if len(blob) < 12:
        raise FormatError(f"{name}: file too short for a RIFF header", 0)
    riff, _, wave_id = struct.unpack_from("<4sI4s", blob, 0)
    if riff != b"RIFF":
        raise FormatError(f"{name}: not a RIFF file (got {riff!r})", 0)
    if wave_id != b"WAVE":
        raise FormatError(f"{name}: RIFF type is {wave_id!r}, expected b'WAVE'", 8)
    pos = 12
    fmt = None
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise FormatError(f"{name}: truncated chunk header", pos)
        cid, size = struct.unpack_from("<4sI", blob, pos)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + size > len(blob):
                raise FormatError(f"{name}: fmt chunk too short ({size} bytes)", pos)
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", blob, body)
            if tag == _WAVE_FORMAT_EXTENSIBLE and size >= 40:
                (tag,) = struct.unpack_from("<H", blob, body + 24)  # first two bytes of the subformat GUID
            if tag != _WAVE_FORMAT_PCM:
                raise FormatError(f"{name}: unsupported encoding tag {tag:#x}, only PCM is read", body)
            if channels != 1:
                raise FormatError(f"{name}: {channels} channels, only mono is supported", body + 2)
            if bits != 16:
                raise FormatError(f"{name}: {bits}-bit samples, only 16-bit is supported", body + 14)
            fmt = rate
        elif cid == b"data":
            if fmt is None:
                raise FormatError(f"{name}: data chunk before fmt chunk", pos)
            if body + size > len(blob):
                raise FormatError(f"{name}: data chunk declares {size} bytes, {len(blob) - body} present", body)
            if size % 2:
                raise FormatError(f"{name}: odd data size {size} for 16-bit samples", pos + 4)
            pcm = np.frombuffer(blob, dtype="<i2", count=size // 2, offset=body)
            return Waveform(pcm.astype(np.float32) / PCM_SCALE, fmt)
        pos = body + size + (size & 1)
    raise FormatError(f"{name}: no data chunk", pos)


def load_wav(path, expected_rate: int | None = SAMPLE_RATE) -> Waveform:
    """Read a PCM 16-bit mono WAV; reject other sample rates unless ``expected_rate`` is None."""
    w = parse_wav(Path(path).read_bytes(), str(path))
    if expected_rate is not None and w.sample_rate != expected_rate:
        raise DataError(f"{path}: sample rate {w.sample_rate} Hz, expected {expected_rate} Hz")
    return w


def write_wav(path, samples, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as PCM 16-bit mono."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


# -- MFCC ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Triangular HTK-mel filters, ``[n_mels, n_fft // 2 + 1]``, peak height 1."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.flags.writeable = False
    return fb


def num_frames(n_samples: int, cfg: FeatureConfig = FeatureConfig()) -> int:
    """Frame count before padding; clips shorter than one window give one zero-padded frame."""
    if n_samples <= cfg.win_length:
        return 1
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def mfcc(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> MfccMatrix:
    """Hann-windowed frames, magnitude spectrum, log-mel energies and orthonormal DCT-II.

    The time axis is zero-padded (or truncated) to ``cfg.n_frames`` columns.
    """
    if w.sample_rate != cfg.sample_rate:
        raise DataError(f"sample rate {w.sample_rate} Hz, expected {cfg.sample_rate} Hz")
    x = w.samples.astype(np.float64)
    if x.size == 0:
        raise DataError("empty waveform")
    n = num_frames(x.size, cfg)
    if x.size < cfg.win_length:
        x = np.pad(x, (0, cfg.win_length - x.size))
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length)[::cfg.hop_length][:n]
    window = get_window("hann", cfg.win_length, fftbins=True)
    spec = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft))
    mel = np.log(np.maximum(spec @ mel_filterbank(cfg).T, cfg.log_floor))
    coeffs = dct(mel, type=2, norm="ortho", axis=1)[:, :cfg.n_mfcc].T
    out = np.zeros((cfg.n_mfcc, cfg.n_frames), dtype=np.float32)
    keep = min(n, cfg.n_frames)
    out[:, :keep] = coeffs[:, :keep]
    return MfccMatrix(out, n)


def write_features_csv(path, m: MfccMatrix) -> None:
    """One row per coefficient, one column per frame."""
    np.savetxt(path, m.coeffs, delimiter=",", fmt="%.9g")


def read_features_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float32, ndmin=2)
