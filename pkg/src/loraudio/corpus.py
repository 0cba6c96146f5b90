"""Audio corpora: WAV and protocol I/O, synthetic spoofing corpora, splits."""

from __future__ import annotations

import io
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import (
    EmptyClass,
    MalformedLine,
    NotWav,
    SampleRateMismatch,
    UnknownLabel,
    UnsupportedBitDepth,
    UnsupportedChannels,
    ValidationError,
)
from .io_utils import atomic_write_bytes, atomic_write_text

LABELS = ("bonafide", "spoof")
ALGORITHMS = ("S1", "S2", "S3", "S4")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size < 1:
            raise ValidationError(f"waveform must be 1-D and nonempty, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValidationError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class ProtocolEntry:
    utt_id: str
    label: str
    algo_id: str = "-"

    def __post_init__(self):
        if not self.utt_id:
            raise ValidationError("utt_id must be nonempty")
        if self.label not in LABELS:
            raise UnknownLabel(f"unknown label {self.label!r}")
        if self.label == "bonafide" and self.algo_id != "-":
            raise ValidationError(f"bonafide entry {self.utt_id} must have algo_id '-'")

    @property
    def is_bonafide(self) -> bool:
        return self.label == "bonafide"


@dataclass(frozen=True)
class CorpusSpec:
    n_bonafide: int = 64
    n_per_algo: int = 64
    algorithms: tuple[str, ...] = ("S1",)
    duration_s: float = 1.0
    sample_rate: int = 16000
    seed: int = 0
    tag: str = "A"

    def __post_init__(self):
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        if self.n_bonafide < 1 or self.n_per_algo < 1:
            raise ValidationError("corpus counts must be >= 1")
        if self.duration_s <= 0:
            raise ValidationError("duration_s must be > 0")
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be > 0")
        if not self.algorithms:
            raise ValidationError("algorithms must be nonempty")
        if len(set(self.algorithms)) != len(self.algorithms):
            raise ValidationError(f"duplicate algorithms in {self.algorithms}")
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ValidationError(f"unknown spoofing algorithms {sorted(unknown)}")


@dataclass
class Corpus:
    entries: list[tuple[ProtocolEntry, Waveform]]
    tag: str = "A"

    def __post_init__(self):
        ids = [e.utt_id for e, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate utt_ids in corpus {self.tag}")

    def __len__(self) -> int:
        return len(self.entries)

    def labels(self) -> np.ndarray:
        """Class indices with bonafide = 0 and spoof = 1."""
        return np.array([0 if e.is_bonafide else 1 for e, _ in self.entries], dtype=np.int64)

    def counts(self) -> dict[str, int]:
        out = dict.fromkeys(LABELS, 0)
        for e, _ in self.entries:
            out[e.label] += 1
        return out


# -- WAV -------------------------------------------------------------------


def read_wav(path, expected_rate: int | None = None) -> Waveform:
    """Read a mono 16-bit PCM WAV file; samples are scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate = f.getnchannels(), f.getsampwidth(), f.getframerate()
            comp = f.getcomptype()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise NotWav(f"{path}: {exc}") from None
    if comp != "NONE":
        raise NotWav(f"{path}: compressed WAV ({comp}) is not supported")
    if channels != 1:
        raise UnsupportedChannels(f"{path}: {channels} channels, only mono is accepted")
    if width != 2:
        raise UnsupportedBitDepth(f"{path}: {8 * width}-bit samples, only 16-bit PCM is accepted")
    if expected_rate is not None and rate != expected_rate:
        raise SampleRateMismatch(f"{path}: sample rate {rate}, expected {expected_rate}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def to_pcm16(w: Waveform) -> np.ndarray:
    return np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, w: Waveform) -> None:
    buf = io.BytesIO()
    with wave.open(buf, "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(to_pcm16(w).tobytes())
    atomic_write_bytes(path, buf.getvalue())


# -- protocols -------------------------------------------------------------


def parse_protocol(path, format: Literal["native", "asvspoof_cm"] = "native") -> list[ProtocolEntry]:
    """Parse a protocol listing.

    ``native`` lines are ``utt_id label algo_id``. ``asvspoof_cm`` lines have
    five fields (speaker, utt_id, -, algo_id, label).
    """
    if format not in ("native", "asvspoof_cm"):
        raise ValidationError(f"unknown protocol format {format!r}")
    entries = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if format == "native":
            if len(fields) != 3:
                raise MalformedLine(line_no, line)
            utt, label, algo = fields
        else:
            if len(fields) != 5:
                raise MalformedLine(line_no, line)
            utt, algo, label = fields[1], fields[3], fields[4]
        if label not in LABELS:
            raise UnknownLabel(f"line {line_no}: unknown label {label!r}")
        if label == "bonafide" and algo != "-":
            raise MalformedLine(line_no, line)
        entries.append(ProtocolEntry(utt, label, algo))
    return entries


def format_protocol(entries) -> str:
    return "".join(f"{e.utt_id} {e.label} {e.algo_id}\n" for e in entries)


def save_corpus(corpus: Corpus, directory) -> Path:
    """Write ``protocol.txt`` and ``wav/<utt_id>.wav`` under ``directory``."""
    root = Path(directory)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    for entry, w in corpus.entries:
        write_wav(root / "wav" / f"{entry.utt_id}.wav", w)
    atomic_write_text(root / "protocol.txt", format_protocol(e for e, _ in corpus.entries))
    return root


def load_corpus(directory, tag: str | None = None, format="native", expected_rate: int | None = None) -> Corpus:
    root = Path(directory)
    entries = parse_protocol(root / "protocol.txt", format)
    pairs = [(e, read_wav(root / "wav" / f"{e.utt_id}.wav", expected_rate)) for e in entries]
    return Corpus(pairs, tag or root.name)


# -- synthesis -------------------------------------------------------------

NOISE_DB = -30.0
RING_CARRIER_HZ = 1700.0
RING_DEPTH = 0.5
NOTCH_STRIDE = 8
PHASE_FRAME = 512


def _envelope(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    # silent lead-in and tail; attack, decay to sustain, release
    start = rng.uniform(0.08, 0.18) * n
    end = rng.uniform(0.72, 0.88) * n
    attack = rng.uniform(0.02, 0.06) * sr
    decay = rng.uniform(0.04, 0.10) * sr
    release = rng.uniform(0.05, 0.12) * sr
    sustain = rng.uniform(0.5, 0.8)
    xp = [0, start, start + attack, start + attack + decay, end - release, end, n]
    fp = [0.0, 0.0, 1.0, sustain, sustain, 0.0, 0.0]
    return np.interp(np.arange(n), np.maximum.accumulate(np.asarray(xp, dtype=float)), fp)


def synth_bonafide(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    f0 = rng.uniform(100.0, 300.0)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    tone = sum(np.sin(2 * np.pi * k * f0 * t + phases[k - 1]) / k for k in (1, 2, 3))
    voiced = tone * _envelope(n, sr, rng)
    voiced *= 0.5 / np.max(np.abs(voiced))
    rms = np.sqrt(np.mean(voiced**2))
    noise = rng.standard_normal(n) * rms * 10 ** (NOISE_DB / 20)
    return voiced + noise


def spoof_quantize(x: np.ndarray) -> np.ndarray:
    """S1: 4-bit midtread amplitude quantization."""
    return np.clip(np.round(x * 8), -8, 7) / 8


def spoof_comb_notch(x: np.ndarray) -> np.ndarray:
    """S2: zero every 8th bin of the whole-utterance FFT (DC included)."""
    spec = np.fft.rfft(x)
    spec[::NOTCH_STRIDE] = 0
    return np.fft.irfft(spec, n=x.size)


def spoof_ring_mod(x: np.ndarray, sr: int) -> np.ndarray:
    """S3: ring modulation by a 1.7 kHz carrier at depth 0.5."""
    carrier = np.cos(2 * np.pi * RING_CARRIER_HZ * np.arange(x.size) / sr)
    return x * ((1 - RING_DEPTH) + RING_DEPTH * carrier)


def spoof_phase_randomize(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """S4: per-frame random phase, magnitude kept, non-overlapping 512-sample frames."""
    out = np.empty_like(x)
    for start in range(0, x.size, PHASE_FRAME):
        seg = x[start : start + PHASE_FRAME]
        spec = np.fft.rfft(seg)
        phi = rng.uniform(0, 2 * np.pi, size=spec.size)
        phi[0] = 0.0
        if seg.size % 2 == 0:
            phi[-1] = 0.0
        out[start : start + seg.size] = np.fft.irfft(np.abs(spec) * np.exp(1j * phi), n=seg.size)
    return out


def apply_spoof(algo: str, x: np.ndarray, sr: int, rng: np.random.Generator) -> np.ndarray:
    if algo == "S1":
        return spoof_quantize(x)
    if algo == "S2":
        return spoof_comb_notch(x)
    if algo == "S3":
        return spoof_ring_mod(x, sr)
    if algo == "S4":
        return spoof_phase_randomize(x, rng)
    raise ValidationError(f"unknown spoofing algorithm {algo!r}")


def synth_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministic synthetic corpus: harmonic 'speech' plus spoofed copies."""
    n = int(round(spec.duration_s * spec.sample_rate))
    jobs = [("bonafide", "-")] * spec.n_bonafide
    for algo in spec.algorithms:
        jobs += [("spoof", algo)] * spec.n_per_algo
    seeds = np.random.SeedSequence(spec.seed).spawn(len(jobs))
    entries = []
    for i, ((label, algo), ss) in enumerate(zip(jobs, seeds)):
        rng = np.random.default_rng(ss)
        x = synth_bonafide(n, spec.sample_rate, rng)
        if label == "spoof":
            x = apply_spoof(algo, x, spec.sample_rate, rng)
        x = np.clip(x, -1.0, 1.0)
        entries.append((ProtocolEntry(f"{spec.tag}_{i:05d}", label, algo), Waveform(x, spec.sample_rate)))
    return Corpus(entries, spec.tag)


def split_corpus(corpus: Corpus, train_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Stratified random split into (train, eval); both keep the corpus order."""
    if not 0 < train_fraction < 1:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    for label in LABELS:
        idx = [i for i, (e, _) in enumerate(corpus.entries) if e.label == label]
        if len(idx) < 2:
            raise EmptyClass(f"label {label!r} has {len(idx)} member(s) in corpus {corpus.tag}; need >= 2")
        k = min(max(int(round(len(idx) * train_fraction)), 1), len(idx) - 1)
        train_idx += [idx[j] for j in rng.permutation(len(idx))[:k]]
    chosen = set(train_idx)
    train = [p for i, p in enumerate(corpus.entries) if i in chosen]
    held = [p for i, p in enumerate(corpus.entries) if i not in chosen]
    return Corpus(train, corpus.tag), Corpus(held, corpus.tag)
