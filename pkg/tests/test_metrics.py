import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import integrate

from sacloc.errors import ContractError
from sacloc.metrics import (
    EvalConfig,
    Segment,
    evaluate_map,
    interpolated_ap,
    match_detections,
    mean_ap,
    rank_detections,
    student_t_sf2,
    students_t,
    temporal_iou,
)


def iou_oracle(a, b):
    fa, fb = set(range(a.start, a.end + 1)), set(range(b.start, b.end + 1))
    return Fraction(len(fa & fb), len(fa | fb))


def literal_ap_oracle(flags):
    n = len(flags)
    if n == 0:
        return Fraction(0)
    p = [Fraction(sum(flags[: i + 1]), i + 1) for i in range(n)]
    return sum(max(p[j:]) for j in range(n)) / n


def t_density_p(t, dof):
    # two-tailed tail mass of the Student density, integrated numerically
    c = math.gamma((dof + 1) / 2) / (math.sqrt(dof * math.pi) * math.gamma(dof / 2))
    tail, _ = integrate.quad(lambda x: c * (1 + x * x / dof) ** (-(dof + 1) / 2), abs(t), math.inf,
                             epsabs=1e-14, epsrel=1e-12)
    return 2 * tail


segments = st.builds(lambda s, n: Segment(s, s + n, 1), st.integers(0, 40), st.integers(0, 30))


class TestIoU:
    def test_identical(self):
        assert temporal_iou(Segment(3, 9, 1), Segment(3, 9, 1)) == 1.0

    def test_disjoint(self):
        assert temporal_iou(Segment(0, 4, 1), Segment(5, 9, 1)) == 0.0

    def test_half_overlap(self):
        assert temporal_iou(Segment(0, 9, 1), Segment(5, 14, 1)) == pytest.approx(1 / 3, abs=1e-15)

    def test_single_frames(self):
        assert temporal_iou(Segment(4, 4, 1), Segment(4, 4, 1)) == 1.0

    @settings(max_examples=200, deadline=None)
    @given(segments, segments)
    def test_matches_frame_counting(self, a, b):
        assert temporal_iou(a, b) == pytest.approx(float(iou_oracle(a, b)), abs=1e-15)
        assert temporal_iou(a, b) == temporal_iou(b, a)

    def test_bad_segment(self):
        with pytest.raises(ContractError):
            Segment(5, 4, 1)

    def test_json_roundtrip(self):
        s = Segment(2, 8, 3, 0.25, "v7")
        assert Segment.from_json(s.to_json()) == s


class TestMatching:
    def test_exact_cover(self):
        assert match_detections([Segment(0, 9, 1)], [Segment(0, 9, 1)], 0.5) == [True]

    def test_two_dets_one_gt(self):
        dets = rank_detections([Segment(0, 9, 1, 0.4), Segment(0, 9, 1, 0.9)])
        assert dets[0].score == 0.9
        assert match_detections(dets, [Segment(0, 9, 1)], 0.5) == [True, False]

    def test_low_iou(self):
        # overlap 3 frames of a 10-frame union -> 0.3
        assert temporal_iou(Segment(0, 4, 1), Segment(2, 9, 1)) == pytest.approx(0.3)
        assert match_detections([Segment(0, 4, 1)], [Segment(2, 9, 1)], 0.5) == [False]

    def test_threshold_inclusive(self):
        assert match_detections([Segment(0, 4, 1)], [Segment(2, 9, 1)], 0.3) == [True]

    def test_class_and_video_must_agree(self):
        gt = [Segment(0, 9, 1, video_id="a")]
        assert match_detections([Segment(0, 9, 2, video_id="a")], gt, 0.5) == [False]
        assert match_detections([Segment(0, 9, 1, video_id="b")], gt, 0.5) == [False]

    def test_claims_best_unmatched(self):
        gts = [Segment(0, 9, 1), Segment(4, 13, 1)]
        dets = [Segment(4, 12, 1, 0.9), Segment(0, 8, 1, 0.8)]
        assert match_detections(dets, gts, 0.5) == [True, True]

    def test_ranking_ties(self):
        a = Segment(5, 6, 1, 0.5, "b")
        b = Segment(2, 3, 1, 0.5, "z")
        c = Segment(5, 6, 1, 0.5, "a")
        assert rank_detections([a, b, c]) == [b, c, a]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(segments, max_size=8), st.lists(segments, max_size=8), st.floats(0.05, 1.0))
    def test_one_to_one(self, dets, gts, thr):
        flags = match_detections(dets, gts, thr)
        assert len(flags) == len(dets)
        assert sum(flags) <= len(gts)


class TestAP:
    def test_hand_trace(self):
        assert interpolated_ap([1, 0, 1]) == pytest.approx(7 / 9, abs=1e-15)

    @pytest.mark.parametrize("n", [1, 2, 7, 50])
    def test_all_correct(self, n):
        assert interpolated_ap([True] * n) == 1.0
        assert interpolated_ap([True] * n, n, mode="standard") == 1.0

    def test_all_wrong(self):
        assert interpolated_ap([False] * 4) == 0.0
        assert interpolated_ap([False] * 4, 3, mode="standard") == 0.0

    def test_empty(self):
        assert interpolated_ap([]) == 0.0

    def test_standard_mode(self):
        # precision at hits: 1 and 2/3; two of three ground truths found
        assert interpolated_ap([1, 0, 1], 3, mode="standard") == pytest.approx((1 + 2 / 3) / 3)

    def test_unknown_mode(self):
        with pytest.raises(ContractError):
            interpolated_ap([1], mode="voc")

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.booleans(), max_size=25))
    def test_literal_matches_oracle(self, flags):
        assert interpolated_ap(flags) == pytest.approx(float(literal_ap_oracle(flags)), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 1000), min_size=1, max_size=12, unique=True), st.integers(0, 2**31))
    def test_monotone_rescaling(self, ticks, seed):
        # grid scores so the warp cannot merge two of them into a float tie
        scores = [t / 1000 for t in ticks]
        rng = np.random.default_rng(seed)
        gts = [Segment(10 * i, 10 * i + 5, 1, video_id="v") for i in range(len(scores))]
        starts = 10 * rng.integers(len(scores), size=len(scores)) + rng.integers(-3, 4, size=len(scores))
        dets = [Segment(int(max(0, a)), int(max(0, a)) + 5, 1, sc, "v") for a, sc in zip(starts, scores)]
        warped = [Segment(d.start, d.end, 1, math.exp(3 * d.score) + 2, "v") for d in dets]
        m1, _ = evaluate_map(dets, gts, [1], 0.5)
        m2, _ = evaluate_map(warped, gts, [1], 0.5)
        assert m1 == m2


class TestMeanAP:
    def test_examples(self):
        assert mean_ap([1, 0]) == 0.5
        assert mean_ap([0.3]) == 0.3
        assert mean_ap([7 / 9, 1, 0]) == pytest.approx(16 / 27, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ContractError):
            mean_ap([])

    def test_class_without_detections_scores_zero(self):
        gts = [Segment(0, 9, 1, video_id="v"), Segment(20, 29, 2, video_id="v")]
        m, per = evaluate_map([Segment(0, 9, 1, 0.9, "v")], gts, [1, 2], 0.5)
        assert per == {1: 1.0, 2: 0.0}
        assert m == 0.5

    def test_duplicated_videos_standard(self):
        mode = "standard"
        rng = np.random.default_rng(0)
        gts, dets = [], []
        for i in range(6):
            s = int(rng.integers(0, 40))
            gts.append(Segment(s, s + 10, 1 + i % 2, video_id="a"))
            d = s + int(rng.integers(-6, 6))
            dets.append(Segment(max(0, d), max(0, d) + 10, 1 + int(rng.integers(2)), float(rng.uniform()), "a"))
        m1, _ = evaluate_map(dets, gts, [1, 2], 0.5, mode)
        gts2 = gts + [Segment(g.start, g.end, g.label, video_id="b") for g in gts]
        dets2 = dets + [Segment(d.start, d.end, d.label, d.score, "b") for d in dets]
        m2, _ = evaluate_map(dets2, gts2, [1, 2], 0.5, mode)
        assert m1 == pytest.approx(m2, abs=1e-12)

    def test_literal_duplication_counterexample(self):
        # the literal average counts trailing misses twice over, so doubling can shift it
        assert interpolated_ap([1, 0]) == 0.75
        assert interpolated_ap([1, 1, 0, 0]) == pytest.approx(19 / 24)
        assert interpolated_ap([1, 1, 0, 0, 1, 1]) == pytest.approx(interpolated_ap([1, 0, 1]))


class TestEvalConfig:
    def test_defaults(self):
        cfg = EvalConfig()
        assert cfg.iou_thresholds == pytest.approx([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
        assert cfg.ap_mode == "eq7_literal"

    @pytest.mark.parametrize("thr", [(0.0,), (1.2,), ()])
    def test_bad_thresholds(self, thr):
        with pytest.raises(ContractError):
            EvalConfig(iou_thresholds=thr)

    def test_bad_mode(self):
        with pytest.raises(ContractError):
            EvalConfig(ap_mode="coco")


class TestStudentT:
    def test_identical(self):
        r = students_t([1.0, 2.0, 4.0], [1.0, 2.0, 4.0])
        assert r.t == 0 and r.p == 1

    def test_example(self):
        r = students_t([1, 2, 3], [2, 3, 4])
        assert r.pooled_sd == pytest.approx(1.0)
        assert r.t == pytest.approx(-1 / math.sqrt(2 / 3), abs=1e-12)
        assert r.dof == 4
        assert r.p == pytest.approx(t_density_p(r.t, 4), abs=1e-10)

    def test_antisymmetry(self):
        a, b = [3.1, 2.7, 3.9, 4.4], [1.0, 2.2, 1.7]
        r1, r2 = students_t(a, b), students_t(b, a)
        assert r1.t == -r2.t and r1.p == r2.p

    def test_zero_variance_equal_means(self):
        r = students_t([2, 2, 2], [2, 2])
        assert (r.t, r.p, r.degenerate_variance) == (0.0, 1.0, False)

    def test_zero_variance_unequal_means(self):
        r = students_t([2, 2, 2], [3, 3])
        assert r.p == 0.0 and r.degenerate_variance and r.t < 0

    def test_too_few(self):
        with pytest.raises(ContractError):
            students_t([1.0], [1.0, 2.0])

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.0, 12.0), st.integers(1, 60))
    def test_sf_matches_density_integral(self, t, dof):
        assert student_t_sf2(t, dof) == pytest.approx(t_density_p(t, dof), rel=1e-7, abs=1e-13)

    def test_tiny_p_representable(self):
        assert 0 < student_t_sf2(20.0, 10) < 1e-8

    def test_large_sample_scaling(self):
        rng = np.random.default_rng(0)
        n = 64
        ts = []
        for _ in range(200):
            ts.append(students_t(rng.normal(1.0, 1.0, n), rng.normal(0.0, 1.0, n)).t)
        assert np.mean(ts) == pytest.approx(math.sqrt(n / 2), rel=0.1)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=10),
           st.lists(st.floats(-100, 100), min_size=2, max_size=10))
    def test_report_ranges(self, a, b):
        assume(np.var(a) + np.var(b) > 1e-6)
        r = students_t(a, b)
        assert r.pooled_sd >= 0 and 0 <= r.p <= 1
        assert set(r.to_json()) >= {"mean1", "mean2", "n1", "n2", "pooled_sd", "t", "p", "dof"}
