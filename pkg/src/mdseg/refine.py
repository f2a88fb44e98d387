"""Detect-crop-resegment loop: a full-frame pass proposes a structure, the
surrounding box (plus background context) is cropped, upsampled, and run
through the network again, and the cycle repeats until consecutive masks
agree or an iteration cap is hit.

Also provides the crop sampler used to train the refinement-stage network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .components import (
    BoundingBox,
    ConnectedComponent,
    extract_components,
    mask_bbox,
)
from .errors import ConfigError, DataError
from .metrics import dice
from .model import ModelParams, forward, mask_from_probs, object_class
from .nn_core import bilinear_resize, nearest_resize


@dataclass(frozen=True)
class RefineConfig:
    context_fraction: float = 0.20
    working_resolution: int = 128
    # None: reuse working_resolution for the crop passes
    refine_resolution: int | None = None
    stop_dice: float = 0.995
    max_iterations: int = 5
    # None: 0.1% of the image area, at least one pixel
    min_component_area: int | None = None
    # None: plain argmax; a float thresholds the object-class probability
    prob_threshold: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.context_fraction <= 1.0:
            raise ConfigError("context_fraction must lie in [0, 1]")
        if not 0.0 < self.stop_dice <= 1.0:
            raise ConfigError("stop_dice must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        for name in ("working_resolution", "refine_resolution"):
            value = getattr(self, name)
            if value is not None and value < 4:
                raise ConfigError(f"{name} must be >= 4")
        if self.min_component_area is not None and self.min_component_area < 1:
            raise ConfigError("min_component_area must be >= 1")
        if self.prob_threshold is not None and not 0.0 < self.prob_threshold < 1.0:
            raise ConfigError("prob_threshold must lie in (0, 1)")

    def crop_resolution(self) -> int:
        return self.refine_resolution or self.working_resolution

    def component_floor(self, image_h: int, image_w: int) -> int:
        if self.min_component_area is not None:
            return self.min_component_area
        return max(1, round(0.001 * image_h * image_w))


@dataclass
class SegmentationResult:
    final_mask: np.ndarray
    prob_map: np.ndarray
    objects: list[ConnectedComponent]
    iterations: int
    dice_trace: list[float] = field(default_factory=list)


def expand_bbox(bbox: BoundingBox, context_fraction: float,
                image_w: int, image_h: int) -> BoundingBox:
    """Push each side outward by half the fraction of its extent, then clamp."""
    dx = math.floor(0.5 * context_fraction * bbox.width + 0.5)
    dy = math.floor(0.5 * context_fraction * bbox.height + 0.5)
    grown = BoundingBox(bbox.x0 - dx, bbox.y0 - dy,
                        bbox.width + 2 * dx, bbox.height + 2 * dy)
    return grown.clamped(image_w, image_h)


def crop_resize(image: np.ndarray, bbox: BoundingBox,
                target_resolution: int) -> np.ndarray:
    crop = image[bbox.slices()]
    return bilinear_resize(crop, target_resolution, target_resolution)


def project_back(prob_map: np.ndarray, bbox: BoundingBox,
                 image_w: int, image_h: int) -> np.ndarray:
    """Resize crop-space class probabilities into a full-frame map.

    Outside the box the background class (channel 0) gets probability 1,
    so downstream argmax never hallucinates structure beyond the crop.
    """
    if prob_map.ndim != 3:
        raise DataError(f"expected (C,h,w) probability map, got {prob_map.shape}")
    channels = prob_map.shape[0]
    full = np.zeros((channels, image_h, image_w), dtype=prob_map.dtype)
    full[0] = 1.0
    ys, xs = bbox.slices()
    for c in range(channels):
        full[c, ys, xs] = bilinear_resize(prob_map[c], bbox.height, bbox.width)
    return full


def _decide_mask(prob_map: np.ndarray, object_cls: int,
                 config: RefineConfig) -> np.ndarray:
    if config.prob_threshold is None:
        return mask_from_probs(prob_map, object_cls)
    return (prob_map[object_cls] >= config.prob_threshold).astype(np.uint8)


def _pass_through_model(params: ModelParams, domain_id: int,
                        image: np.ndarray, bbox: BoundingBox,
                        resolution: int, config: RefineConfig):
    """Crop, run the network, project back; returns (mask, prob_map, objects)."""
    h, w = image.shape
    crop = crop_resize(image, bbox, resolution)
    crop_probs = forward(params, domain_id, crop[None].astype(np.float32))
    prob_map = project_back(crop_probs, bbox, w, h)
    mask = _decide_mask(prob_map, object_class(params, domain_id), config)
    objects = extract_components(mask, config.component_floor(h, w))
    if objects:
        kept = np.zeros_like(mask)
        for comp in objects:
            kept |= comp.mask
        mask = kept
    else:
        mask = np.zeros_like(mask)
    return mask, prob_map, objects


def segment_once(params: ModelParams, domain_id: int, image: np.ndarray,
                 config: RefineConfig = RefineConfig()) -> SegmentationResult:
    """Single full-frame pass at the working resolution, no refinement."""
    if image.ndim != 2:
        raise DataError(f"expected a 2-d image, got shape {image.shape}")
    h, w = image.shape
    whole = BoundingBox(0, 0, w, h)
    mask, prob_map, objects = _pass_through_model(
        params, domain_id, image, whole, config.working_resolution, config)
    return SegmentationResult(mask, prob_map, objects, iterations=1)


def refine_iterate(params: ModelParams, domain_id: int, image: np.ndarray,
                   config: RefineConfig = RefineConfig(),
                   refine_params: ModelParams | None = None) -> SegmentationResult:
    """Iterative crop-and-resegment; stops once consecutive masks agree.

    ``refine_params`` selects a crop-specialized network for iterations >= 2;
    by default the full-frame network is reused.
    """
    result = segment_once(params, domain_id, image, config)
    crop_net = refine_params if refine_params is not None else params
    h, w = image.shape
    mask, prob_map, objects = result.final_mask, result.prob_map, result.objects
    trace: list[float] = []
    iterations = 1

    while iterations < config.max_iterations and objects:
        bbox = expand_bbox(objects[0].bbox, config.context_fraction, w, h)
        new_mask, prob_map, objects = _pass_through_model(
            crop_net, domain_id, image, bbox, config.crop_resolution(), config)
        iterations += 1
        agreement = dice(new_mask, mask)
        trace.append(agreement)
        mask = new_mask
        if agreement >= config.stop_dice:
            break

    return SegmentationResult(mask, prob_map, objects, iterations, trace)


def sample_training_crops(image: np.ndarray, gt_mask: np.ndarray, count: int,
                          rng: np.random.Generator, *,
                          margin_low: float = 0.10, margin_high: float = 0.50,
                          jitter: float = 0.10,
                          target_resolution: int = 128):
    """Crops around the ground-truth structure with randomized context.

    Each crop grows the tight bounding box by a margin drawn from
    [margin_low, margin_high] and shifts it by an integer jitter capped so
    the structure's box always stays inside. Images are resized bilinearly,
    masks by nearest neighbor, both to a square target.
    """
    if not 0 <= margin_low <= margin_high <= 1:
        raise ConfigError("margins must satisfy 0 <= low <= high <= 1")
    tight = mask_bbox(gt_mask)
    if tight is None:
        raise DataError("ground-truth mask is empty; nothing to crop around")
    h, w = image.shape

    crops = []
    for _ in range(count):
        fraction = rng.uniform(margin_low, margin_high)
        dx = math.floor(0.5 * fraction * tight.width + 0.5)
        dy = math.floor(0.5 * fraction * tight.height + 0.5)
        # jitter never exceeds the context margin, so the tight box stays inside
        jx_max = min(math.floor(jitter * tight.width), dx)
        jy_max = min(math.floor(jitter * tight.height), dy)
        jx = int(rng.integers(-jx_max, jx_max + 1)) if jx_max else 0
        jy = int(rng.integers(-jy_max, jy_max + 1)) if jy_max else 0
        box = BoundingBox(tight.x0 - dx + jx, tight.y0 - dy + jy,
                          tight.width + 2 * dx, tight.height + 2 * dy)
        box = box.clamped(w, h)
        ys, xs = box.slices()
        crop_img = bilinear_resize(image[ys, xs],
                                   target_resolution, target_resolution)
        crop_mask = nearest_resize(gt_mask[ys, xs],
                                   target_resolution, target_resolution)
        crops.append((crop_img, crop_mask))
    return crops
