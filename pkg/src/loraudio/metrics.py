"""Score files, DET sweep points and equal error rate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MalformedLine, OneClassOnly, UnknownLabel, ValidationError
from .io_utils import atomic_write_text


@dataclass(frozen=True)
class ScoreRecord:
    utt_id: str
    score: float
    label: str

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValidationError(f"{self.utt_id}: score must be finite")
        if self.label not in ("bonafide", "spoof"):
            raise UnknownLabel(f"{self.utt_id}: unknown label {self.label!r}")


def _split(records) -> tuple[np.ndarray, np.ndarray]:
    bona = np.array([r.score for r in records if r.label == "bonafide"], dtype=np.float64)
    spoof = np.array([r.score for r in records if r.label == "spoof"], dtype=np.float64)
    if bona.size == 0 or spoof.size == 0:
        raise OneClassOnly(f"need both labels, got {bona.size} bonafide and {spoof.size} spoof")
    return bona, spoof


def det_points(records) -> list[tuple[float, float, float]]:
    """(threshold, FAR, FRR) at every distinct score.

    A score >= threshold is accepted as bonafide: FRR counts bonafide below
    the threshold, FAR counts spoof at or above it.
    """
    bona, spoof = _split(records)
    thresholds = np.unique(np.concatenate([bona, spoof]))
    frr = np.searchsorted(np.sort(bona), thresholds, side="left") / bona.size
    far = (spoof.size - np.searchsorted(np.sort(spoof), thresholds, side="left")) / spoof.size
    return list(zip(thresholds.tolist(), far.tolist(), frr.tolist()))


def compute_eer(records) -> tuple[float, float]:
    """(EER, threshold), interpolating linearly where FAR and FRR cross between sweep points."""
    points = det_points(records)
    # past the top score nothing is accepted
    points.append((math.inf, 0.0, 1.0))
    prev_t = None
    for k, (t, far, frr) in enumerate(points):
        if far == frr:
            if k == 0:
                return far, t
            return far, (prev_t + t) / 2 if math.isfinite(t) else prev_t
        if frr > far:
            p_t, p_far, p_frr = points[k - 1]
            d0, d1 = p_far - p_frr, far - frr
            alpha = d0 / (d0 - d1)
            eer = p_frr + alpha * (frr - p_frr)
            thr = p_t + alpha * (t - p_t) if math.isfinite(t) else p_t
            return eer, thr
        prev_t = t
    raise AssertionError("FRR never reached FAR")  # unreachable: the last point has FRR = 1 > FAR = 0


def write_scores(records, path) -> None:
    atomic_write_text(path, "".join(f"{r.utt_id} {r.score:.9f} {r.label}\n" for r in records))


def read_scores(path) -> list[ScoreRecord]:
    out = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 3:
            raise MalformedLine(line_no, line)
        try:
            value = float(fields[1])
        except ValueError:
            raise MalformedLine(line_no, line) from None
        if not math.isfinite(value) or fields[2] not in ("bonafide", "spoof"):
            raise MalformedLine(line_no, line)
        out.append(ScoreRecord(fields[0], value, fields[2]))
    return out
