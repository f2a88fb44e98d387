"""Overlap and boundary-distance measures plus per-domain detection scoring.

Conventions: masks are 2-d arrays where nonzero means object. Dice and
Jaccard treat empty-vs-empty as perfect agreement (1.0). The Hausdorff
distance runs over boundary pixel sets; an empty first argument falls back
to the whole image (its boundary is the border ring), while an empty
ground truth is an error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .components import ConnectedComponent, extract_components
from .errors import DataError, ShapeError
from .utils import thread_map


@dataclass(frozen=True)
class DetectionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise DataError("detection counts must be non-negative")

    def __add__(self, other: "DetectionCounts") -> "DetectionCounts":
        return DetectionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a) != 0
    b = np.asarray(b) != 0
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    a, b = _pair(a, b)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def jaccard(a, b) -> float:
    a, b = _pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def boundary_mask(mask) -> np.ndarray:
    """Object pixels with a 4-neighbour outside the object or on the edge."""
    m = np.asarray(mask) != 0
    padded = np.pad(m, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _boundary_coords(mask) -> np.ndarray:
    return np.argwhere(boundary_mask(mask)).astype(np.float64)


def _directed_max_min(src: np.ndarray, dst: np.ndarray) -> float:
    """sup over src of inf over dst of Euclidean distance, chunked."""
    worst = 0.0
    for start in range(0, len(src), 512):
        block = src[start : start + 512]
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        worst = max(worst, float(d2.min(axis=1).max()))
    return worst


def hausdorff(a, b, image_shape=None) -> float:
    """Symmetric Hausdorff distance between boundary pixel sets, in pixels."""
    a, b = _pair(a, b)
    if not b.any():
        raise DataError("ground-truth mask is empty")
    if image_shape is None:
        image_shape = a.shape
    if not a.any():
        a = np.ones(image_shape, dtype=bool)
    pa, pb = _boundary_coords(a), _boundary_coords(b)
    worst = max(_directed_max_min(pa, pb), _directed_max_min(pb, pa))
    return float(np.sqrt(worst))


def _object_masks(objects) -> list[np.ndarray]:
    return [o.mask if isinstance(o, ConnectedComponent) else np.asarray(o) != 0
            for o in objects]


def match_detections(pred_objects, gt_objects) -> DetectionCounts:
    """Greedy one-to-one matching by descending Jaccard; J >= 0.5 is a hit."""
    preds = _object_masks(pred_objects)
    gts = _object_masks(gt_objects)
    scored = []
    for pi, p in enumerate(preds):
        for gi, g in enumerate(gts):
            j = jaccard(p, g)
            if j >= 0.5:
                scored.append((-j, pi, gi))
    scored.sort()

    pred_used = [False] * len(preds)
    gt_used = [False] * len(gts)
    tp = 0
    for _, pi, gi in scored:
        if pred_used[pi] or gt_used[gi]:
            continue
        pred_used[pi] = gt_used[gi] = True
        tp += 1
    return DetectionCounts(tp, len(preds) - tp, len(gts) - tp)


def f1(counts: DetectionCounts) -> float:
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return 2 * counts.tp / denom


@dataclass(frozen=True)
class EvalRow:
    domain: str
    f1: float
    dice_mean: float
    hausdorff_mean_px: float
    n: int


@dataclass(frozen=True)
class EvalReport:
    rows: list[EvalRow]

    def to_json(self) -> str:
        return json.dumps([
            {"domain": r.domain, "f1": r.f1, "dice_mean": r.dice_mean,
             "hausdorff_mean_px": r.hausdorff_mean_px, "n": r.n}
            for r in self.rows
        ], indent=2)

    def to_text(self) -> str:
        headers = ("domain", "F1", "mean Dice", "mean Hausdorff (px)", "n")
        cells = [headers] + [
            (r.domain, f"{r.f1:.4f}", f"{r.dice_mean:.4f}",
             f"{r.hausdorff_mean_px:.2f}", str(r.n))
            for r in self.rows
        ]
        widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
        lines = []
        for ri, row in enumerate(cells):
            lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
            if ri == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines)


def _score_one(pred_mask, gt_mask) -> tuple[DetectionCounts, float, float]:
    counts = match_detections(extract_components(pred_mask),
                              extract_components(gt_mask))
    return counts, dice(pred_mask, gt_mask), hausdorff(pred_mask, gt_mask)


def evaluate_masks(pairs_by_domain: dict) -> EvalReport:
    """Score (pred mask, gt mask) pairs grouped per domain name.

    Detection counts aggregate across a domain before the F1; Dice and
    Hausdorff average per image. Images fan out to worker threads; the
    aggregation order is fixed by the input order.
    """
    rows = []
    for domain, pairs in pairs_by_domain.items():
        pairs = list(pairs)
        if not pairs:
            raise DataError(f"domain {domain!r} has no evaluation pairs")
        scores = thread_map(lambda pg: _score_one(pg[0], pg[1]), pairs)
        counts = DetectionCounts()
        dice_sum = 0.0
        hd_sum = 0.0
        for c, d, h in scores:
            counts = counts + c
            dice_sum += d
            hd_sum += h
        rows.append(EvalRow(domain, f1(counts), dice_sum / len(pairs),
                            hd_sum / len(pairs), len(pairs)))
    return EvalReport(rows)


def evaluate_dataset(segment_fn, dataset) -> EvalReport:
    """Run a segmenter over a dataset split and score it per domain.

    ``segment_fn(image, domain_id) -> binary mask``; ``dataset`` exposes
    ``domain_names`` and ``samples(domain_id)`` yielding objects with
    ``image``/``mask``/``domain_id`` fields.
    """
    pairs_by_domain = {}
    for domain_id, name in enumerate(dataset.domain_names):
        samples = list(dataset.samples(domain_id))
        if not samples:
            raise DataError(f"domain {name!r} has no samples to evaluate")
        preds = thread_map(
            lambda s: segment_fn(s.image, s.domain_id), samples)
        pairs_by_domain[name] = [
            (pred, s.mask) for pred, s in zip(preds, samples)
        ]
    return evaluate_masks(pairs_by_domain)
