"""Crop-and-refine loop: box expansion geometry, probability projection,
termination rules, and the training-crop sampler."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdseg.components import BoundingBox, extract_components
from mdseg.errors import ConfigError, DataError
from mdseg.metrics import dice
from mdseg.model import build_model
from mdseg.nn_core import bilinear_resize, nearest_resize
from mdseg.refine import (
    RefineConfig,
    SegmentationResult,
    crop_resize,
    expand_bbox,
    project_back,
    refine_iterate,
    sample_training_crops,
    segment_once,
)


def disk_mask(size=64, radius=12, cx=None, cy=None):
    cx = size // 2 if cx is None else cx
    cy = size // 2 if cy is None else cy
    yy, xx = np.mgrid[0:size, 0:size]
    return (((xx - cx) ** 2 + (yy - cy) ** 2) <= radius**2).astype(np.uint8)


@pytest.fixture(scope="module")
def sd_net():
    return build_model("sd", num_domains=1, arch_preset="compact", rng_seed=3)


SMALL = RefineConfig(working_resolution=16)


class TestRefineConfig:
    def test_defaults(self):
        cfg = RefineConfig()
        assert cfg.context_fraction == 0.20
        assert cfg.working_resolution == 128
        assert cfg.crop_resolution() == 128
        assert cfg.stop_dice == 0.995
        assert cfg.max_iterations == 5

    def test_refine_resolution_override(self):
        assert RefineConfig(refine_resolution=64).crop_resolution() == 64

    def test_component_floor_default_is_permille(self):
        cfg = RefineConfig()
        assert cfg.component_floor(128, 128) == 16
        assert cfg.component_floor(10, 10) == 1  # never below one pixel

    def test_component_floor_explicit(self):
        assert RefineConfig(min_component_area=7).component_floor(128, 128) == 7

    @pytest.mark.parametrize("kwargs", [
        {"context_fraction": -0.1},
        {"context_fraction": 1.5},
        {"stop_dice": 0.0},
        {"stop_dice": 1.1},
        {"max_iterations": 0},
        {"min_component_area": 0},
        {"prob_threshold": 0.0},
        {"prob_threshold": 1.0},
        {"working_resolution": 2},
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            RefineConfig(**kwargs)


class TestExpandBbox:
    def test_pinned_example(self):
        out = expand_bbox(BoundingBox(10, 10, 20, 20), 0.2, 100, 100)
        assert out == BoundingBox(8, 8, 24, 24)

    def test_zero_fraction_identity(self):
        box = BoundingBox(3, 7, 11, 5)
        assert expand_bbox(box, 0.0, 64, 64) == box

    def test_corner_clamped(self):
        out = expand_bbox(BoundingBox(0, 0, 10, 10), 1.0, 32, 32)
        assert out == BoundingBox(0, 0, 15, 15)

    def test_never_exceeds_image(self):
        out = expand_bbox(BoundingBox(20, 20, 12, 12), 1.0, 32, 32)
        assert out.x0 >= 0 and out.y0 >= 0
        assert out.x1 <= 32 and out.y1 <= 32

    @given(
        x0=st.integers(50, 80), y0=st.integers(50, 80),
        w=st.integers(1, 40), h=st.integers(1, 40),
        f1=st.floats(0, 1), f2=st.floats(0, 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_monotone_in_fraction(self, x0, y0, w, h, f1, f2):
        lo, hi = sorted((f1, f2))
        box = BoundingBox(x0, y0, w, h)
        # image large enough that clamping cannot bind
        small = expand_bbox(box, lo, 300, 300)
        big = expand_bbox(box, hi, 300, 300)
        assert big.x0 <= small.x0 and big.y0 <= small.y0
        assert big.x1 >= small.x1 and big.y1 >= small.y1


class TestCropResize:
    def test_whole_image_identity(self):
        img = np.random.default_rng(0).random((32, 32)).astype(np.float32)
        out = crop_resize(img, BoundingBox(0, 0, 32, 32), 32)
        np.testing.assert_array_equal(out, img)

    def test_constant_stays_constant(self):
        img = np.full((40, 40), 0.6, dtype=np.float32)
        out = crop_resize(img, BoundingBox(5, 9, 12, 7), 24)
        np.testing.assert_allclose(out, 0.6, rtol=1e-6)

    def test_matches_resize_oracle_on_patch(self):
        img = np.zeros((10, 10))
        patch = np.array([[1.0, 2.0], [3.0, 4.0]])
        img[4:6, 7:9] = patch
        out = crop_resize(img, BoundingBox(7, 4, 2, 2), 4)
        np.testing.assert_allclose(out, bilinear_resize(patch, 4, 4))


class TestProjectBack:
    def test_identity_bbox_is_identity(self):
        probs = np.random.default_rng(1).dirichlet([1, 1], (12, 10))
        probs = np.moveaxis(probs, -1, 0)  # (2, 12, 10)
        out = project_back(probs, BoundingBox(0, 0, 10, 12), 10, 12)
        np.testing.assert_array_equal(out, probs)

    def test_outside_bbox_is_background(self):
        probs = np.full((2, 4, 4), 0.5)
        out = project_back(probs, BoundingBox(2, 3, 4, 4), 16, 16)
        outside = np.ones((16, 16), bool)
        outside[3:7, 2:6] = False
        assert (out[0][outside] == 1.0).all()
        assert (out[1][outside] == 0.0).all()
        np.testing.assert_allclose(out[:, 3:7, 2:6], 0.5)

    def test_all_background_projects_to_empty_mask(self):
        probs = np.zeros((2, 8, 8))
        probs[0] = 1.0
        out = project_back(probs, BoundingBox(1, 1, 8, 8), 12, 12)
        assert (out.argmax(axis=0) == 0).all()

    def test_non_3d_rejected(self):
        with pytest.raises(DataError):
            project_back(np.zeros((4, 4)), BoundingBox(0, 0, 4, 4), 4, 4)

    def test_crop_project_round_trip_dice(self):
        # crop around a blob, upsample, project back: only a boundary band
        # may flip, so agreement with the original stays high
        mask = disk_mask(64, 12)
        probs = np.stack([1.0 - mask, mask]).astype(np.float64)
        bbox = expand_bbox(BoundingBox(20, 20, 25, 25), 0.2, 64, 64)
        crop = np.stack([crop_resize(p, bbox, 128) for p in probs])
        back = project_back(crop, bbox, 64, 64)
        recovered = (back.argmax(axis=0) == 1).astype(np.uint8)
        assert dice(recovered, mask) >= 0.95


class TestSegmentOnce:
    def test_deterministic_and_well_formed(self, sd_net):
        img = np.random.default_rng(5).random((48, 40)).astype(np.float32)
        a = segment_once(sd_net, 0, img, SMALL)
        b = segment_once(sd_net, 0, img, SMALL)
        np.testing.assert_array_equal(a.final_mask, b.final_mask)
        np.testing.assert_array_equal(a.prob_map, b.prob_map)
        assert a.iterations == 1
        assert a.dice_trace == []
        assert a.final_mask.shape == (48, 40)
        assert a.prob_map.shape == (2, 48, 40)
        assert set(np.unique(a.final_mask)) <= {0, 1}
        np.testing.assert_allclose(a.prob_map.sum(axis=0)[5:-5, 5:-5], 1.0,
                                   rtol=1e-5)

    def test_objects_match_final_mask(self, sd_net):
        img = np.random.default_rng(6).random((32, 32)).astype(np.float32)
        res = segment_once(sd_net, 0, img, SMALL)
        floor = SMALL.component_floor(32, 32)
        again = extract_components(res.final_mask, floor)
        assert [c.area for c in again] == [c.area for c in res.objects]

    def test_small_specks_filtered(self, sd_net):
        img = np.random.default_rng(7).random((32, 32)).astype(np.float32)
        cfg = RefineConfig(working_resolution=16, min_component_area=10**6)
        res = segment_once(sd_net, 0, img, cfg)
        assert res.objects == []
        assert res.final_mask.sum() == 0

    def test_non_2d_rejected(self, sd_net):
        with pytest.raises(DataError):
            segment_once(sd_net, 0, np.zeros((1, 16, 16), np.float32), SMALL)


class TestRefineIterate:
    def test_always_terminates_within_cap(self, sd_net):
        img = np.random.default_rng(8).random((40, 40)).astype(np.float32)
        for cap in (1, 2, 5):
            cfg = RefineConfig(working_resolution=16, max_iterations=cap,
                               stop_dice=1.0)
            res = refine_iterate(sd_net, 0, img, cfg)
            assert 1 <= res.iterations <= cap
            assert len(res.dice_trace) == res.iterations - 1

    def test_empty_first_detection_returns_single_pass(self, sd_net):
        img = np.random.default_rng(9).random((32, 32)).astype(np.float32)
        cfg = RefineConfig(working_resolution=16, prob_threshold=0.999999)
        res = refine_iterate(sd_net, 0, img, cfg)
        assert res.iterations == 1
        assert res.dice_trace == []
        assert res.final_mask.sum() == 0

    def test_whole_image_fixed_point(self, sd_net):
        # threshold ~0 makes every pixel "object", so the detection box is
        # the full frame; with zero added context, iteration 2 must replay
        # iteration 1 bit for bit and stop with a perfect agreement score
        img = np.random.default_rng(10).random((32, 32)).astype(np.float32)
        cfg = RefineConfig(working_resolution=16, context_fraction=0.0,
                           prob_threshold=1e-9)
        res = refine_iterate(sd_net, 0, img, cfg)
        assert res.iterations == 2
        assert res.dice_trace == [1.0]
        assert res.final_mask.all()

    def test_separate_refine_net_is_used(self, sd_net):
        other = build_model("sd", num_domains=1, arch_preset="compact", rng_seed=99)
        img = np.random.default_rng(11).random((32, 32)).astype(np.float32)
        cfg = RefineConfig(working_resolution=16, context_fraction=0.0,
                           prob_threshold=1e-9)
        same = refine_iterate(sd_net, 0, img, cfg)
        swapped = refine_iterate(sd_net, 0, img, cfg, refine_params=other)
        assert same.iterations == swapped.iterations == 2
        assert not np.array_equal(same.prob_map, swapped.prob_map)

    def test_result_mask_binary(self, sd_net):
        img = np.random.default_rng(12).random((32, 32)).astype(np.float32)
        res = refine_iterate(sd_net, 0, img, SMALL)
        assert isinstance(res, SegmentationResult)
        assert set(np.unique(res.final_mask)) <= {0, 1}


class TestSampleTrainingCrops:
    def make_scene(self, size=64, radius=10):
        mask = disk_mask(size, radius)
        img = np.where(mask, 0.8, 0.2).astype(np.float32)
        return img, mask

    def test_zero_margin_is_tight_bbox(self):
        img, mask = self.make_scene()
        from mdseg.components import mask_bbox
        tight = mask_bbox(mask)
        (ci, cm), = sample_training_crops(
            img, mask, 1, np.random.default_rng(0),
            margin_low=0.0, margin_high=0.0, jitter=0.0, target_resolution=32)
        ys, xs = tight.slices()
        np.testing.assert_array_equal(cm, nearest_resize(mask[ys, xs], 32, 32))
        np.testing.assert_allclose(ci, bilinear_resize(img[ys, xs], 32, 32))

    def test_all_crop_masks_nonempty(self):
        img, mask = self.make_scene()
        crops = sample_training_crops(img, mask, 30, np.random.default_rng(1),
                                      target_resolution=64)
        assert len(crops) == 30
        for ci, cm in crops:
            assert cm.sum() > 0
            assert ci.shape == cm.shape == (64, 64)
            assert set(np.unique(cm)) <= {0, 1}

    def test_structure_fraction_shrinks_with_margin(self):
        img, mask = self.make_scene()
        fractions = []
        for margin in (0.1, 0.3, 0.5):
            (_, cm), = sample_training_crops(
                img, mask, 1, np.random.default_rng(2),
                margin_low=margin, margin_high=margin, jitter=0.0,
                target_resolution=48)
            fractions.append(cm.mean())
        assert fractions[0] > fractions[1] > fractions[2]

    def test_empty_gt_rejected(self):
        with pytest.raises(DataError, match="empty"):
            sample_training_crops(np.zeros((16, 16)), np.zeros((16, 16), np.uint8),
                                  1, np.random.default_rng(0))

    def test_bad_margins_rejected(self):
        img, mask = self.make_scene()
        with pytest.raises(ConfigError):
            sample_training_crops(img, mask, 1, np.random.default_rng(0),
                                  margin_low=0.5, margin_high=0.1)

    def test_deterministic_per_seed(self):
        img, mask = self.make_scene()
        a = sample_training_crops(img, mask, 5, np.random.default_rng(7),
                                  target_resolution=32)
        b = sample_training_crops(img, mask, 5, np.random.default_rng(7),
                                  target_resolution=32)
        for (ai, am), (bi, bm) in zip(a, b):
            np.testing.assert_array_equal(ai, bi)
            np.testing.assert_array_equal(am, bm)
