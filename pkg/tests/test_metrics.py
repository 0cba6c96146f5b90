import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from loraudio.errors import MalformedLine, OneClassOnly, UnknownLabel, ValidationError
from loraudio.metrics import ScoreRecord, compute_eer, det_points, read_scores, write_scores


def records(bona, spoof):
    out = [ScoreRecord(f"b{i}", float(s), "bonafide") for i, s in enumerate(bona)]
    return out + [ScoreRecord(f"s{i}", float(s), "spoof") for i, s in enumerate(spoof)]


def sweep_oracle(bona, spoof) -> float:
    """Count errors at every midpoint threshold (plus both ends) and interpolate the crossing."""
    bona, spoof = np.asarray(bona, float), np.asarray(spoof, float)
    u = np.unique(np.r_[bona, spoof])
    cuts = np.r_[u[0] - 1.0, (u[:-1] + u[1:]) / 2, u[-1] + 1.0]
    far = [sum(1 for s in spoof if s >= c) / len(spoof) for c in cuts]
    frr = [sum(1 for b in bona if b < c) / len(bona) for c in cuts]
    for k in range(len(cuts)):
        if far[k] == frr[k]:
            return far[k]
        if frr[k] > far[k]:
            d0, d1 = far[k - 1] - frr[k - 1], far[k] - frr[k]
            return frr[k - 1] + d0 / (d0 - d1) * (frr[k] - frr[k - 1])
    raise AssertionError


def test_perfect_separation():
    eer, thr = compute_eer(records([0.9, 0.8], [0.2, 0.1]))
    assert eer == 0.0 and 0.2 < thr <= 0.8


def test_all_equal_scores():
    assert compute_eer(records([0.3] * 4, [0.3] * 6))[0] == 0.5


def test_three_by_three_example():
    eer, thr = compute_eer(records([0.8, 0.6, 0.4], [0.7, 0.3, 0.2]))
    assert eer == pytest.approx(1 / 3, abs=1e-12)
    assert thr == pytest.approx(0.5, abs=1e-12)


def test_needs_both_labels():
    with pytest.raises(OneClassOnly):
        compute_eer(records([0.1, 0.2], []))
    with pytest.raises(OneClassOnly):
        det_points(records([], [0.5]))


def test_record_validation():
    with pytest.raises(ValidationError):
        ScoreRecord("u", math.inf, "spoof")
    with pytest.raises(UnknownLabel):
        ScoreRecord("u", 0.0, "fake")


def test_det_points_examples():
    pts = det_points(records([1.0], [0.0]))
    assert len(pts) == 2
    assert any(far == frr == 0 for _, far, frr in det_points(records([0.9, 0.8], [0.2, 0.1])))


scores = st.lists(st.integers(-40, 40).map(lambda i: i / 8), min_size=1, max_size=30)


@given(scores, scores)
def test_det_points_monotone(bona, spoof):
    pts = det_points(records(bona, spoof))
    fars = [p[1] for p in pts]
    frrs = [p[2] for p in pts]
    assert all(a >= b for a, b in zip(fars, fars[1:]))
    assert all(a <= b for a, b in zip(frrs, frrs[1:]))


@given(scores, scores)
def test_eer_bounded_by_sweep_points(bona, spoof):
    eer, _ = compute_eer(records(bona, spoof))
    pts = det_points(records(bona, spoof)) + [(math.inf, 0.0, 1.0)]
    assert 0.0 <= eer <= 1.0
    assert max(min(f, r) for _, f, r in pts) - 1e-12 <= eer <= min(max(f, r) for _, f, r in pts) + 1e-12


def test_matches_sweep_oracle_on_1000_sets():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        nb, ns = rng.integers(1, 40, size=2)
        if rng.random() < 0.5:
            bona, spoof = rng.normal(1.0, 1.0, nb), rng.normal(0.0, 1.0, ns)
        else:
            # coarse grid so ties across labels are common
            bona, spoof = rng.integers(0, 6, nb) / 2.0, rng.integers(0, 5, ns) / 2.0
        assert abs(compute_eer(records(bona, spoof))[0] - sweep_oracle(bona, spoof)) <= 1e-9


@given(scores, scores)
def test_label_swap_symmetry(bona, spoof):
    a = compute_eer(records(bona, spoof))[0]
    b = compute_eer(records([-s for s in spoof], [-s for s in bona]))[0]
    assert abs(a - b) <= 1e-12


@given(scores, scores, st.sampled_from([lambda x: 3 * x + 1, lambda x: x**3, np.exp, np.arctan]))
def test_monotone_transform_invariance(bona, spoof, f):
    a = compute_eer(records(bona, spoof))[0]
    b = compute_eer(records([f(s) for s in bona], [f(s) for s in spoof]))[0]
    assert a == b


def test_score_file_format(tmp_path):
    recs = records([0.5, 1 / 3], [-2.25])
    write_scores(recs, tmp_path / "s.txt")
    lines = (tmp_path / "s.txt").read_text().splitlines()
    assert lines[0] == "b0 0.500000000 bonafide"
    back = read_scores(tmp_path / "s.txt")
    assert [r.utt_id for r in back] == ["b0", "b1", "s0"]
    assert all(abs(x.score - y.score) <= 1e-9 for x, y in zip(recs, back))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_score_round_trip(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("s") / "s.txt"
    recs = [ScoreRecord(f"u{i}", v, "spoof" if i % 2 else "bonafide") for i, v in enumerate(values)]
    write_scores(recs, path)
    assert all(abs(a.score - b.score) <= 1e-9 for a, b in zip(recs, read_scores(path)))


def test_read_scores_errors(tmp_path):
    p = tmp_path / "s.txt"
    p.write_text("u1 0.500000000 bonafide\n")
    assert read_scores(p)[0].score == 0.5
    p.write_text("u1 0.5 bonafide\nu1 abc bonafide\n")
    with pytest.raises(MalformedLine) as err:
        read_scores(p)
    assert err.value.line_no == 2
    p.write_text("u1 0.5 maybe\n")
    with pytest.raises(MalformedLine):
        read_scores(p)
