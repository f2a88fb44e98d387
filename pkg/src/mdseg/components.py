"""Connected components and bounding boxes on binary masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError

# cross-shaped structuring element: 4-connectivity
FOUR_CONNECTIVITY = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class BoundingBox:
    """Pixel-aligned box: (x0, y0) inclusive top-left, extent width x height."""

    x0: int
    y0: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ShapeError(f"degenerate box {self}")

    @property
    def x1(self) -> int:
        """One past the rightmost column."""
        return self.x0 + self.width

    @property
    def y1(self) -> int:
        """One past the bottom row."""
        return self.y0 + self.height

    @property
    def area(self) -> int:
        return self.width * self.height

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def clamped(self, image_w: int, image_h: int) -> "BoundingBox":
        x0 = min(max(self.x0, 0), image_w - 1)
        y0 = min(max(self.y0, 0), image_h - 1)
        x1 = max(min(self.x1, image_w), x0 + 1)
        y1 = max(min(self.y1, image_h), y0 + 1)
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class ConnectedComponent:
    mask: np.ndarray
    area: int
    bbox: BoundingBox


def _as_binary(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"expected a 2-d mask, got shape {mask.shape}")
    return mask != 0


def extract_components(mask, min_area: int = 1) -> list[ConnectedComponent]:
    """4-connected components at least min_area pixels, largest first.

    Equal areas keep raster-scan discovery order, so the result is
    deterministic for any input.
    """
    binary = _as_binary(mask)
    labeled, count = ndimage.label(binary, structure=FOUR_CONNECTIVITY)
    if count == 0:
        return []
    areas = ndimage.sum_labels(binary, labeled, index=range(1, count + 1))
    boxes = ndimage.find_objects(labeled)

    comps = []
    for label in sorted(range(1, count + 1),
                        key=lambda l: (-int(areas[l - 1]), l)):
        area = int(areas[label - 1])
        if area < min_area:
            continue
        rows, cols = boxes[label - 1]
        bbox = BoundingBox(cols.start, rows.start,
                           cols.stop - cols.start, rows.stop - rows.start)
        comps.append(ConnectedComponent(labeled == label, area, bbox))
    return comps


def largest_component(mask, min_area: int = 1) -> ConnectedComponent | None:
    comps = extract_components(mask, min_area)
    return comps[0] if comps else None


def mask_bbox(mask) -> BoundingBox | None:
    """Tight box around all set pixels, or None for an empty mask."""
    binary = _as_binary(mask)
    rows = np.flatnonzero(binary.any(axis=1))
    cols = np.flatnonzero(binary.any(axis=0))
    if rows.size == 0:
        return None
    return BoundingBox(int(cols[0]), int(rows[0]),
                       int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))
