"""Linear-frequency cepstral coefficients (LFCC) with delta features."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .corpus import Waveform
from .errors import BadMagic, TooShort, ValidationError
from .io_utils import Reader, atomic_write_bytes

CACHE_MAGIC = b"LFCC0001"


@dataclass(frozen=True)
class LfccConfig:
    frame_len: int = 400
    hop: int = 160
    n_fft: int = 512
    n_filters: int = 20
    n_ceps: int = 20
    include_deltas: bool = True
    target_frames: int = 96
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_ceps > self.n_filters:
            raise ValidationError(f"n_ceps ({self.n_ceps}) must not exceed n_filters ({self.n_filters})")
        if self.n_fft < self.frame_len:
            raise ValidationError(f"n_fft ({self.n_fft}) must be >= frame_len ({self.frame_len})")
        if self.target_frames < 1 or self.hop < 1 or self.frame_len < 1 or self.n_filters < 1 or self.n_ceps < 1:
            raise ValidationError("frame_len, hop, n_filters, n_ceps and target_frames must be >= 1")
        if self.log_floor <= 0:
            raise ValidationError("log_floor must be > 0")

    @property
    def dims(self) -> int:
        return self.n_ceps * (3 if self.include_deltas else 1)


def frame_signal(w: Waveform | np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size < frame_len:
        raise TooShort(f"signal has {x.size} samples, frame length is {frame_len}")
    n_frames = 1 + (x.size - frame_len) // hop
    idx = hop * np.arange(n_frames)[:, None] + np.arange(frame_len)[None, :]
    return x[idx] * np.hamming(frame_len)


def filter_centers(n_filters: int, sample_rate: int) -> np.ndarray:
    """Center frequencies (Hz): interior points of an even grid from 0 to Nyquist."""
    return np.linspace(0.0, sample_rate / 2, n_filters + 2)[1:-1]


def linear_filterbank(n_filters: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on a linear frequency axis, each scaled to peak at 1."""
    if n_filters < 1:
        raise ValidationError("n_filters must be >= 1")
    edges = np.linspace(0.0, sample_rate / 2, n_filters + 2)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    bank = np.zeros((n_filters, freqs.size))
    for k in range(n_filters):
        lo, mid, hi = edges[k], edges[k + 1], edges[k + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        bank[k] = np.clip(np.minimum(rise, fall), 0.0, None)
        peak = bank[k].max()
        if peak > 0:
            bank[k] /= peak
    return bank


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; ``dct_matrix(n) @ v`` equals ``dct(v, norm='ortho')``."""
    return dct(np.eye(n), type=2, norm="ortho", axis=0)


def deltas(feats: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over frames with edge replication."""
    t = feats.shape[0]
    padded = np.pad(feats, ((width, width), (0, 0)), mode="edge")
    num = sum(n * (padded[width + n : width + n + t] - padded[width - n : width - n + t]) for n in range(1, width + 1))
    return num / (2 * sum(n * n for n in range(1, width + 1)))


def pad_or_crop(feats: np.ndarray, target_frames: int) -> np.ndarray:
    """Keep the first ``target_frames`` rows, or tile from the start until long enough."""
    if feats.shape[0] == 0:
        raise ValidationError("feature map is empty")
    if feats.shape[0] >= target_frames:
        return feats[:target_frames]
    reps = -(-target_frames // feats.shape[0])
    return np.tile(feats, (reps, 1))[:target_frames]


def log_filterbank_energies(w: Waveform, cfg: LfccConfig) -> np.ndarray:
    frames = frame_signal(w, cfg.frame_len, cfg.hop)
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2 / cfg.n_fft
    energies = power @ linear_filterbank(cfg.n_filters, cfg.n_fft, w.sample_rate).T
    return np.log(np.maximum(energies, cfg.log_floor))


def static_cepstra(w: Waveform, cfg: LfccConfig) -> np.ndarray:
    return dct(log_filterbank_energies(w, cfg), type=2, norm="ortho", axis=1)[:, : cfg.n_ceps]


def lfcc(w: Waveform, cfg: LfccConfig = LfccConfig()) -> np.ndarray:
    """Feature map of shape (target_frames, dims), float64."""
    ceps = static_cepstra(w, cfg)
    if cfg.include_deltas:
        d1 = deltas(ceps)
        ceps = np.hstack([ceps, d1, deltas(d1)])
    return pad_or_crop(ceps, cfg.target_frames)


def write_feature_cache(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype="<f4")
    header = CACHE_MAGIC + struct.pack("<II", *feats.shape)
    atomic_write_bytes(path, header + np.ascontiguousarray(feats).tobytes())


def read_feature_cache(path) -> np.ndarray:
    with open(path, "rb") as f:
        r = Reader(f.read(), str(path))
    if r.take(8) != CACHE_MAGIC:
        raise BadMagic(f"{path}: not an LFCC feature cache")
    frames, dims = r.unpack("II")
    return np.frombuffer(r.take(4 * frames * dims), dtype="<f4").reshape(frames, dims).copy()
