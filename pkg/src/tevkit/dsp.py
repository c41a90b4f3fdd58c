"""Acoustic front end: framing, Fbank, MFCC, derivatives, splicing, CMVN.

Conventions, fixed here and relied on elsewhere:

* frame count is ``1 + floor((N - L) / S)`` for N >= L samples; the tail
  that does not fill a frame is dropped, never padded;
* pre-emphasis is applied inside each frame (the first sample is
  pre-emphasized against itself), so frames are independent;
* the filterbank applies triangular weights on the mel scale
  ``1127 * ln(1 + f/700)`` between 20 Hz and 7600 Hz to the power
  spectrum, and log energies are floored at 1e-10 before the log;
* MFCC keeps cepstra 1..19 (c0 excluded) and appends the log raw-frame
  energy as the 20th dimension.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .corpus import AudioSegment

ENERGY_FLOOR = 1e-10
MEL_LOW_HZ = 20.0
MEL_HIGH_HZ = 7600.0


@dataclass
class FrontendConfig:
    frame_len_ms: float = 25.0
    frame_shift_ms: float = 10.0
    preemphasis: float = 0.97
    n_mel_bins: int = 40          # 40 for the Fbank path, 23 for the MFCC path
    n_ceps: int = 19
    fft_size: int | None = None   # power of two >= frame length when set
    dither: float = 0.0

    def frame_len(self, sample_rate: int) -> int:
        return int(round(self.frame_len_ms * sample_rate / 1000.0))

    def frame_shift(self, sample_rate: int) -> int:
        return int(round(self.frame_shift_ms * sample_rate / 1000.0))

    def resolved_fft_size(self, sample_rate: int) -> int:
        n = self.frame_len(sample_rate)
        if self.fft_size is not None:
            if self.fft_size < n or self.fft_size & (self.fft_size - 1):
                raise ValueError("fft_size must be a power of two >= frame length")
            return self.fft_size
        size = 1
        while size < n:
            size *= 2
        return size

    def __post_init__(self):
        if self.frame_shift_ms > self.frame_len_ms:
            raise ValueError("frame shift must not exceed frame length")
        if self.n_ceps >= self.n_mel_bins:
            raise ValueError("n_ceps must be smaller than n_mel_bins")


MFCC_CONFIG = FrontendConfig(n_mel_bins=23, n_ceps=19)
FBANK_CONFIG = FrontendConfig(n_mel_bins=40)


@dataclass
class FeatureMatrix:
    """frames x dims real matrix with a human-readable dimension label."""

    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError("feature matrix must be 2-D with at least one frame")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def frame_count(n_samples: int, frame_len: int, frame_shift: int) -> int:
    if n_samples < frame_len:
        raise ValueError(f"segment of {n_samples} samples is shorter than one frame ({frame_len})")
    return 1 + (n_samples - frame_len) // frame_shift


def _frame_signal(seg: AudioSegment, cfg: FrontendConfig) -> np.ndarray:
    length = cfg.frame_len(seg.sample_rate)
    shift = cfg.frame_shift(seg.sample_rate)
    n = frame_count(len(seg), length, shift)
    idx = np.arange(length)[None, :] + shift * np.arange(n)[:, None]
    frames = seg.samples[idx]
    if cfg.dither > 0:
        # reproducible by construction: the dither source is fixed
        rng = np.random.default_rng(0)
        frames = frames + cfg.dither * rng.standard_normal(frames.shape)
    return frames


def _preemphasize(frames: np.ndarray, coeff: float) -> np.ndarray:
    out = frames.copy()
    out[:, 1:] -= coeff * frames[:, :-1]
    out[:, 0] -= coeff * frames[:, 0]
    return out


def mel_scale(hz):
    return 1127.0 * np.log1p(np.asarray(hz, dtype=np.float64) / 700.0)


def mel_filterbank(n_bins: int, fft_size: int, sample_rate: int,
                   low_hz: float = MEL_LOW_HZ, high_hz: float = MEL_HIGH_HZ) -> np.ndarray:
    """Triangular mel filters as a (n_bins, fft_size//2 + 1) weight matrix."""
    high_hz = min(high_hz, sample_rate / 2.0)
    centers = np.linspace(mel_scale(low_hz), mel_scale(high_hz), n_bins + 2)
    bin_freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    bin_mels = mel_scale(bin_freqs)
    weights = np.zeros((n_bins, bin_mels.size))
    for j in range(n_bins):
        left, center, right = centers[j], centers[j + 1], centers[j + 2]
        rising = (bin_mels - left) / (center - left)
        falling = (right - bin_mels) / (right - center)
        weights[j] = np.clip(np.minimum(rising, falling), 0.0, None)
    return weights


def _power_spectrum(frames: np.ndarray, cfg: FrontendConfig, sample_rate: int) -> np.ndarray:
    pre = _preemphasize(frames, cfg.preemphasis)
    window = np.hamming(frames.shape[1])
    spec = np.fft.rfft(pre * window, n=cfg.resolved_fft_size(sample_rate), axis=1)
    return np.abs(spec) ** 2


def fbank(seg: AudioSegment, cfg: FrontendConfig = FBANK_CONFIG) -> FeatureMatrix:
    """Log mel filterbank energies, one row per frame."""
    frames = _frame_signal(seg, cfg)
    power = _power_spectrum(frames, cfg, seg.sample_rate)
    fb = mel_filterbank(cfg.n_mel_bins, cfg.resolved_fft_size(seg.sample_rate), seg.sample_rate)
    energies = power @ fb.T
    feats = np.log(np.maximum(energies, ENERGY_FLOOR))
    return FeatureMatrix(feats, label=f"fbank{cfg.n_mel_bins}")


def mfcc(seg: AudioSegment, cfg: FrontendConfig = MFCC_CONFIG) -> FeatureMatrix:
    """Cepstra 1..n_ceps plus log raw-frame energy (n_ceps + 1 dims)."""
    frames = _frame_signal(seg, cfg)
    raw_energy = np.log(np.maximum(np.sum(frames ** 2, axis=1), ENERGY_FLOOR))
    power = _power_spectrum(frames, cfg, seg.sample_rate)
    fb = mel_filterbank(cfg.n_mel_bins, cfg.resolved_fft_size(seg.sample_rate), seg.sample_rate)
    logmel = np.log(np.maximum(power @ fb.T, ENERGY_FLOOR))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, 1:cfg.n_ceps + 1]
    feats = np.hstack([ceps, raw_energy[:, None]])
    return FeatureMatrix(feats, label=f"mfcc{cfg.n_ceps}+e")


def _delta(values: np.ndarray, window: int) -> np.ndarray:
    """Regression delta with edge replication."""
    n = values.shape[0]
    denom = 2.0 * sum(k * k for k in range(1, window + 1))
    out = np.zeros_like(values)
    for k in range(1, window + 1):
        plus = values[np.minimum(np.arange(n) + k, n - 1)]
        minus = values[np.maximum(np.arange(n) - k, 0)]
        out += k * (plus - minus)
    return out / denom


def add_deltas(f: FeatureMatrix, order: int = 2, window: int = 2) -> FeatureMatrix:
    """Append derivative features: output dims = base * (1 + order)."""
    if order not in (1, 2):
        raise ValueError("delta order must be 1 or 2")
    blocks = [f.values]
    for _ in range(order):
        blocks.append(_delta(blocks[-1], window))
    out = np.hstack(blocks)
    return FeatureMatrix(out, label=f"{f.label}+d{order}:{out.shape[1]}")


def splice(f: FeatureMatrix, left: int = 4, right: int = 4) -> FeatureMatrix:
    """Concatenate each frame with its context, edges replicated."""
    n = f.n_frames
    cols = []
    for off in range(-left, right + 1):
        idx = np.clip(np.arange(n) + off, 0, n - 1)
        cols.append(f.values[idx])
    out = np.hstack(cols)
    width = left + right + 1
    return FeatureMatrix(out, label=f"{f.label}x{width}:{out.shape[1]}")


def cmvn(f: FeatureMatrix, variance: bool = True) -> FeatureMatrix:
    """Per-utterance mean (and variance, when frames >= 2) normalization."""
    centered = f.values - f.values.mean(axis=0)
    if variance and f.n_frames >= 2:
        std = centered.std(axis=0)
        scale = np.where(std > 1e-10, std, 1.0)
        centered = centered / scale
    return FeatureMatrix(centered, label=f.label)


# --------------------------------------------------------------------------
# Feature archive: versioned binary cache of per-utterance matrices
# --------------------------------------------------------------------------

ARCHIVE_MAGIC = b"TEVF"
ARCHIVE_VERSION = 1


def write_feature_archive(path, items: dict[str, np.ndarray], tag: str = "") -> None:
    """Write utt_id -> matrix pairs as little-endian float32 records."""
    buf = [ARCHIVE_MAGIC, struct.pack("<I", ARCHIVE_VERSION)]
    tag_b = tag.encode("utf-8")
    buf.append(struct.pack("<H", len(tag_b)))
    buf.append(tag_b)
    for utt_id, values in items.items():
        arr = np.ascontiguousarray(values, dtype="<f4")
        if arr.ndim == 1:
            arr = arr[None, :]
        uid = utt_id.encode("utf-8")
        buf.append(struct.pack("<H", len(uid)))
        buf.append(uid)
        buf.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        buf.append(arr.tobytes())
    Path(path).write_bytes(b"".join(buf))


def read_feature_archive(path) -> tuple[str, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != ARCHIVE_MAGIC:
        raise ValueError(f"{path}: not a feature archive")
    (version,) = struct.unpack("<I", data[4:8])
    if version != ARCHIVE_VERSION:
        raise ValueError(f"{path}: unsupported archive version {version}")
    pos = 8
    (tag_len,) = struct.unpack("<H", data[pos:pos + 2])
    pos += 2
    tag = data[pos:pos + tag_len].decode("utf-8")
    pos += tag_len
    items: dict[str, np.ndarray] = {}
    while pos < len(data):
        (uid_len,) = struct.unpack("<H", data[pos:pos + 2])
        pos += 2
        utt_id = data[pos:pos + uid_len].decode("utf-8")
        pos += uid_len
        rows, cols = struct.unpack("<II", data[pos:pos + 8])
        pos += 8
        count = rows * cols
        arr = np.frombuffer(data[pos:pos + 4 * count], dtype="<f4").reshape(rows, cols)
        pos += 4 * count
        items[utt_id] = arr.astype(np.float64)
    return tag, items
