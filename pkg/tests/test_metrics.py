"""Metric correctness against brute-force oracles and the scoring report."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdseg.errors import DataError, ShapeError
from mdseg.metrics import (
    DetectionCounts,
    EvalReport,
    boundary_mask,
    dice,
    evaluate_masks,
    f1,
    hausdorff,
    jaccard,
    match_detections,
)

from .oracles import (
    boundary_points,
    brute_force_hausdorff,
    pixel_dice,
    pixel_jaccard,
)


def random_mask(seed, h=12, w=12, density=0.4, nonempty=False):
    rng = np.random.default_rng(seed)
    m = (rng.random((h, w)) < density).astype(np.uint8)
    if nonempty and not m.any():
        m[h // 2, w // 2] = 1
    return m


class TestDiceJaccard:
    def test_identical_masks(self):
        m = random_mask(0, nonempty=True)
        assert dice(m, m) == 1.0
        assert jaccard(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((6, 6), dtype=np.uint8)
        b = np.zeros((6, 6), dtype=np.uint8)
        a[0, 0] = 1
        b[5, 5] = 1
        assert dice(a, b) == 0.0
        assert jaccard(a, b) == 0.0

    def test_pinned_overlap_values(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0:4] = 1          # |A| = 4
        b[0, 0:2] = 1          # |B| = 2, overlap 2
        assert dice(a, b) == pytest.approx(4 / 6)
        assert jaccard(a, b) == pytest.approx(0.5)

    def test_empty_vs_empty_is_one(self):
        z = np.zeros((5, 5))
        assert dice(z, z) == 1.0
        assert jaccard(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice(np.zeros((3, 3)), np.zeros((4, 4)))
        with pytest.raises(ShapeError):
            jaccard(np.zeros((3, 3)), np.zeros((3, 4)))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_pixel_count_oracles(self, seed):
        a, b = random_mask(seed), random_mask(seed + 1000)
        assert dice(a, b) == pixel_dice(a, b)
        assert jaccard(a, b) == pixel_jaccard(a, b)

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_identities_and_bounds(self, seed):
        a = random_mask(seed, nonempty=True)
        b = random_mask(seed + 1, nonempty=True)
        d, j = dice(a, b), jaccard(a, b)
        assert 0.0 <= j <= d <= 1.0
        assert d == dice(b, a) and j == jaccard(b, a)
        assert abs(j - d / (2 - d)) <= 1e-12
        assert abs(d - 2 * j / (1 + j)) <= 1e-12


class TestBoundary:
    def test_filled_square_boundary_is_ring(self):
        m = np.zeros((7, 7), dtype=np.uint8)
        m[1:6, 1:6] = 1
        b = boundary_mask(m)
        assert b[1, 1] and b[1, 5] and b[5, 5]
        assert not b[3, 3]
        assert b.sum() == 16  # perimeter of a 5x5 block

    def test_edge_pixels_count_as_boundary(self):
        m = np.ones((4, 4), dtype=np.uint8)
        b = boundary_mask(m)
        assert b[0, 0] and b[0, 3] and b[3, 0]
        assert not b[1, 1]

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle_points(self, seed):
        m = random_mask(seed, h=10, w=14)
        got = sorted(map(tuple, np.argwhere(boundary_mask(m))))
        assert got == sorted(boundary_points(m))


class TestHausdorff:
    def test_identical_masks_zero(self):
        m = random_mask(3, nonempty=True)
        assert hausdorff(m, m) == 0.0

    def test_single_pixel_distance(self):
        a = np.zeros((8, 8), dtype=np.uint8)
        b = np.zeros((8, 8), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 4] = 1
        assert hausdorff(a, b) == pytest.approx(5.0, abs=1e-12)

    def test_filled_vs_ring_of_same_square_is_zero(self):
        # boundary sets are equal, so the distance vanishes
        filled = np.zeros((9, 9), dtype=np.uint8)
        filled[2:7, 2:7] = 1
        ring = boundary_mask(filled).astype(np.uint8)
        assert hausdorff(filled, ring) == 0.0

    def test_empty_gt_raises(self):
        with pytest.raises(DataError):
            hausdorff(random_mask(0, nonempty=True), np.zeros((12, 12)))

    def test_empty_prediction_uses_whole_image_fallback(self):
        gt = np.zeros((10, 10), dtype=np.uint8)
        gt[4:6, 4:6] = 1
        pred = np.zeros((10, 10), dtype=np.uint8)
        got = hausdorff(pred, gt)
        assert got == pytest.approx(brute_force_hausdorff(pred, gt, (10, 10)),
                                    abs=1e-9)
        # farthest border point from the centered blob: a corner
        assert got > 4.0

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_brute_force_oracle(self, seed):
        a = random_mask(seed, h=9, w=11)
        b = random_mask(seed + 500, h=9, w=11, nonempty=True)
        expect = brute_force_hausdorff(a, b, a.shape)
        assert hausdorff(a, b) == pytest.approx(expect, abs=1e-9)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_symmetry_and_triangle(self, seed):
        a = random_mask(seed, h=8, w=8, nonempty=True)
        b = random_mask(seed + 1, h=8, w=8, nonempty=True)
        c = random_mask(seed + 2, h=8, w=8, nonempty=True)
        hab, hba = hausdorff(a, b), hausdorff(b, a)
        assert hab == pytest.approx(hba, abs=1e-12)
        assert hausdorff(a, c) <= hab + hausdorff(b, c) + 1e-9

    def test_zero_iff_equal_boundary_sets(self):
        a = random_mask(9, nonempty=True)
        b = a.copy()
        b[0, 0] ^= 1
        if boundary_mask(a).sum() != boundary_mask(b).sum() or \
                not np.array_equal(boundary_mask(a), boundary_mask(b)):
            assert hausdorff(a, b) > 0.0


class TestDetectionMatching:
    def blob(self, pixels, shape=(8, 8)):
        m = np.zeros(shape, dtype=np.uint8)
        for r, c in pixels:
            m[r, c] = 1
        return m

    def test_exact_match(self):
        gt = self.blob([(2, 2), (2, 3)])
        counts = match_detections([gt.copy()], [gt])
        assert (counts.tp, counts.fp, counts.fn) == (1, 0, 0)

    def test_jaccard_exactly_half_is_tp(self):
        pred = self.blob([(1, 1), (1, 2)])  # two pixels
        gt = self.blob([(1, 1)])            # one shared: J = 1/2
        assert jaccard(pred, gt) == 0.5
        counts = match_detections([pred], [gt])
        assert counts.tp == 1 and counts.fp == 0 and counts.fn == 0

    def test_just_below_half_is_fp(self):
        pred = self.blob([(1, 1), (1, 2), (1, 3)])
        gt = self.blob([(1, 1)])  # J = 1/3
        counts = match_detections([pred], [gt])
        assert (counts.tp, counts.fp, counts.fn) == (0, 1, 1)

    def test_two_preds_one_strong_one_weak(self):
        gt = self.blob([(r, c) for r in range(2, 6) for c in range(2, 6)])
        strong = self.blob([(r, c) for r in range(2, 6) for c in range(2, 6)])
        strong[2, 2] = 0  # J = 15/16
        weak = self.blob([(7, 7)])
        counts = match_detections([strong, weak], [gt])
        assert (counts.tp, counts.fp, counts.fn) == (1, 1, 0)

    def test_one_gt_cannot_match_two_preds(self):
        gt = self.blob([(r, c) for r in range(0, 4) for c in range(0, 4)])
        p1 = self.blob([(r, c) for r in range(0, 4) for c in range(0, 4)])
        p2 = p1.copy()
        p2[0, 0] = 0
        counts = match_detections([p1, p2], [gt])
        assert (counts.tp, counts.fp, counts.fn) == (1, 1, 0)

    def test_greedy_prefers_highest_jaccard(self):
        gt = self.blob([(r, c) for r in range(0, 4) for c in range(0, 4)])
        good = gt.copy()
        worse = gt.copy()
        worse[0, 0] = worse[0, 1] = 0
        counts = match_detections([worse, good], [gt])
        assert counts.tp == 1 and counts.fp == 1

    def test_no_objects_at_all(self):
        counts = match_detections([], [])
        assert (counts.tp, counts.fp, counts.fn) == (0, 0, 0)

    def test_negative_counts_rejected(self):
        with pytest.raises(DataError):
            DetectionCounts(tp=-1)


class TestF1:
    def test_pinned_value(self):
        assert f1(DetectionCounts(2, 1, 1)) == pytest.approx(2 / 3)

    def test_perfect(self):
        assert f1(DetectionCounts(5, 0, 0)) == 1.0

    def test_zero_tp_with_misses(self):
        assert f1(DetectionCounts(0, 0, 3)) == 0.0

    def test_vacuous_case_is_one(self):
        assert f1(DetectionCounts(0, 0, 0)) == 1.0

    @given(st.integers(1, 20), st.integers(0, 20), st.integers(0, 20))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_errors(self, tp, fp, fn):
        base = f1(DetectionCounts(tp, fp, fn))
        assert f1(DetectionCounts(tp, fp + 1, fn)) <= base
        assert f1(DetectionCounts(tp, fp, fn + 1)) <= base


class TestEvaluate:
    def gt_pairs(self, n=4, seed=0):
        pairs = []
        rng = np.random.default_rng(seed)
        for _ in range(n):
            m = np.zeros((16, 16), dtype=np.uint8)
            r, c = rng.integers(2, 8, 2)
            m[r : r + 6, c : c + 6] = 1
            pairs.append((m.copy(), m))
        return pairs

    def test_oracle_segmenter_is_perfect(self):
        report = evaluate_masks({"a": self.gt_pairs(), "b": self.gt_pairs(seed=1)})
        for row in report.rows:
            assert row.f1 == 1.0
            assert row.dice_mean == 1.0
            assert row.hausdorff_mean_px == 0.0
            assert row.n == 4

    def test_all_empty_predictions(self):
        pairs = [(np.zeros_like(g), g) for _, g in self.gt_pairs()]
        report = evaluate_masks({"a": pairs})
        row = report.rows[0]
        assert row.f1 == 0.0
        assert row.dice_mean == 0.0
        expected_hd = np.mean([
            brute_force_hausdorff(np.zeros_like(g), g, g.shape)
            for _, g in pairs
        ])
        assert row.hausdorff_mean_px == pytest.approx(expected_hd, abs=1e-9)

    def test_row_order_follows_input_order(self):
        report = evaluate_masks(
            {"z": self.gt_pairs(1), "a": self.gt_pairs(1, seed=2)})
        assert [r.domain for r in report.rows] == ["z", "a"]

    def test_empty_domain_rejected(self):
        with pytest.raises(DataError):
            evaluate_masks({"a": []})

    def test_json_keys(self):
        report = evaluate_masks({"a": self.gt_pairs(2)})
        data = json.loads(report.to_json())
        assert set(data[0]) == {"domain", "f1", "dice_mean",
                                "hausdorff_mean_px", "n"}

    def test_text_table_lists_each_domain(self):
        report = evaluate_masks(
            {"rings": self.gt_pairs(2), "blobs": self.gt_pairs(2, seed=3)})
        text = report.to_text()
        assert "rings" in text and "blobs" in text
        assert len(text.splitlines()) == 4  # header, rule, two rows

    def test_eroded_prediction_dice_matches_pixel_arithmetic(self):
        gt = np.zeros((16, 16), dtype=np.uint8)
        gt[4:12, 4:12] = 1
        eroded = np.zeros_like(gt)
        eroded[5:11, 5:11] = 1  # one-pixel erosion of the square
        report = evaluate_masks({"a": [(eroded, gt)]})
        expect = 2 * 36 / (36 + 64)
        assert report.rows[0].dice_mean == pytest.approx(expect, abs=1e-9)

    def test_thread_count_does_not_change_report(self, monkeypatch):
        pairs = {"a": self.gt_pairs(6), "b": self.gt_pairs(5, seed=7)}
        monkeypatch.setenv("MDSEG_THREADS", "1")
        one = evaluate_masks(pairs).to_json()
        monkeypatch.setenv("MDSEG_THREADS", "4")
        four = evaluate_masks(pairs).to_json()
        assert one == four
