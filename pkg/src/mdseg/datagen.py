"""Synthetic ultrasound-style phantoms: several shape-family "domains",
speckle noise, and acoustic-shadow wedges, written to disk as PGM + manifest.

Every sample derives its own rng stream from (seed, domain, split, index),
so generation order and worker counts cannot change a single pixel, and
growing one split never perturbs another.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .components import extract_components
from .errors import ConfigError, DataError, FilesystemError
from .pgm import read_image, read_mask, write_mask_pgm, write_pgm
from .utils import thread_map

SHAPE_FAMILIES = ("ellipse_ring", "convex_blob", "bilobed_blob")
SPLITS = ("train", "test")

# fuzzy-border blur, in pixels; fixed across domains
BLUR_SIGMA = 1.2
# annulus inner radius as a fraction of the outer, for ellipse_ring
RING_INNER = 0.65
# accepted slack between requested and rasterized foreground fraction
AREA_TOLERANCE = 0.15


@dataclass(frozen=True)
class DomainSpec:
    name: str
    shape_family: str
    size_range: tuple[float, float]
    eccentricity_range: tuple[float, float]
    interior_mean: float
    exterior_mean: float
    shadow_probability: float
    speckle_strength: float = 0.08

    def __post_init__(self):
        if self.shape_family not in SHAPE_FAMILIES:
            raise ConfigError(f"unknown shape family {self.shape_family!r}")
        for lo, hi, what in ((*self.size_range, "size_range"),
                             (*self.eccentricity_range, "eccentricity_range")):
            if not 0 < lo < hi:
                raise ConfigError(f"{what} must satisfy 0 < low < high")
        if not (0 <= self.exterior_mean <= 1 and 0 <= self.interior_mean <= 1):
            raise ConfigError("intensity means must lie in [0,1]")
        if abs(self.interior_mean - self.exterior_mean) < 0.15:
            raise ConfigError("interior/exterior means must differ by >= 0.15")
        if not 0 <= self.shadow_probability <= 1:
            raise ConfigError("shadow_probability must lie in [0,1]")
        if self.speckle_strength < 0:
            raise ConfigError("speckle_strength must be non-negative")


@dataclass(frozen=True)
class ShadowParams:
    attenuation_range: tuple[float, float] = (0.4, 0.75)
    half_angle_range: tuple[float, float] = (0.10, 0.28)


# The third domain is deliberately the hardest (widest shape variation,
# weakest contrast, heaviest artifacts): small training splits of it
# underdetermine the shape distribution, which is what the multi-domain
# trunk sharing is supposed to compensate for.
DEFAULT_DOMAINS = (
    DomainSpec("ring", "ellipse_ring", (0.06, 0.14), (1.0, 1.5),
               interior_mean=0.78, exterior_mean=0.32, shadow_probability=0.3),
    DomainSpec("convex", "convex_blob", (0.08, 0.20), (1.0, 2.0),
               interior_mean=0.72, exterior_mean=0.30, shadow_probability=0.3),
    DomainSpec("bilobed", "bilobed_blob", (0.06, 0.20), (1.2, 2.4),
               interior_mean=0.64, exterior_mean=0.38, shadow_probability=0.5,
               speckle_strength=0.12),
)


@dataclass(frozen=True)
class ImageSample:
    image: np.ndarray
    mask: np.ndarray
    domain_id: int


@dataclass
class Dataset:
    domain_names: list[str]
    split: str
    seed: int
    by_domain: list[list[ImageSample]]

    def samples(self, domain_id: int) -> list[ImageSample]:
        return self.by_domain[domain_id]

    def counts(self) -> list[int]:
        return [len(s) for s in self.by_domain]


def _ellipse(res: int, cx, cy, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
    v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _draw_mask(spec: DomainSpec, res: int, rng: np.random.Generator) -> np.ndarray:
    area_frac = rng.uniform(*spec.size_range)
    ecc = rng.uniform(*spec.eccentricity_range)
    theta = rng.uniform(0.0, math.pi)
    cx = rng.uniform(0.34, 0.66) * res
    cy = rng.uniform(0.34, 0.66) * res
    target = area_frac * res * res

    if spec.shape_family == "convex_blob":
        b = math.sqrt(target / (math.pi * ecc))
        return _ellipse(res, cx, cy, ecc * b, b, theta)

    if spec.shape_family == "ellipse_ring":
        b = math.sqrt(target / (math.pi * ecc * (1.0 - RING_INNER**2)))
        a = ecc * b
        outer = _ellipse(res, cx, cy, a, b, theta)
        inner = _ellipse(res, cx, cy, RING_INNER * a, RING_INNER * b, theta)
        return outer & ~inner

    # bilobed: two overlapping lobes along the orientation axis
    b = math.sqrt(0.62 * target / (math.pi * ecc))
    a = ecc * b
    shift = 0.75 * a
    dx, dy = shift * math.cos(theta), shift * math.sin(theta)
    lobe1 = _ellipse(res, cx - dx / 2, cy - dy / 2, a, b, theta)
    lobe2 = _ellipse(res, cx + dx / 2, cy + dy / 2, a, b, theta)
    return lobe1 | lobe2


def _mask_acceptable(mask: np.ndarray, spec: DomainSpec) -> bool:
    if mask[0, :].any() or mask[-1, :].any() or mask[:, 0].any() or mask[:, -1].any():
        return False
    frac = mask.mean()
    lo, hi = spec.size_range
    if not lo * (1 - AREA_TOLERANCE) <= frac <= hi * (1 + AREA_TOLERANCE):
        return False
    return len(extract_components(mask)) == 1


def apply_speckle(image: np.ndarray, rng: np.random.Generator,
                  strength: float) -> np.ndarray:
    """Multiplicative unit-mean gamma noise with variance = strength."""
    if strength < 0:
        raise ConfigError("speckle strength must be non-negative")
    if strength == 0:
        return image.copy()
    noise = rng.gamma(shape=1.0 / strength, scale=strength, size=image.shape)
    return np.clip(image * noise, 0.0, 1.0)


def apply_shadow(image: np.ndarray, rng: np.random.Generator,
                 params: ShadowParams = ShadowParams()) -> np.ndarray:
    """Attenuate a wedge cast from a random apex on the top edge."""
    h, w = image.shape
    apex_x = rng.uniform(0, w - 1)
    axis = rng.uniform(math.pi / 2 - 0.35, math.pi / 2 + 0.35)
    half_angle = rng.uniform(*params.half_angle_range)
    factor = rng.uniform(*params.attenuation_range)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    angles = np.arctan2(yy + 1.0, xx - apex_x)  # +1: apex sits just above row 0
    wedge = np.abs(angles - axis) <= half_angle
    out = image.copy()
    out[wedge] *= factor
    return out


def generate_sample(spec: DomainSpec, resolution: int,
                    rng: np.random.Generator, domain_id: int = 0) -> ImageSample:
    """Render one phantom; consumes the generator deterministically."""
    if resolution < 32:
        raise ConfigError(f"resolution must be >= 32, got {resolution}")

    for _ in range(64):
        mask = _draw_mask(spec, resolution, rng)
        if _mask_acceptable(mask, spec):
            break
    else:
        raise DataError(
            f"domain {spec.name!r}: no acceptable mask in 64 attempts; "
            "size/eccentricity ranges are too tight for this resolution")

    clean = np.where(mask, spec.interior_mean, spec.exterior_mean)
    fuzzy = ndimage.gaussian_filter(clean, sigma=BLUR_SIGMA)
    noisy = apply_speckle(fuzzy, rng, spec.speckle_strength)
    if rng.random() < spec.shadow_probability:
        noisy = apply_shadow(noisy, rng)

    return ImageSample(noisy.astype(np.float32), mask.astype(np.uint8), domain_id)


def sample_rng(seed: int, domain_id: int, split: str, index: int) -> np.random.Generator:
    """Stream keyed by sample identity: order of generation cannot matter."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, domain_id, SPLITS.index(split), index]))


def _relpaths(split: str, domain_id: int, index: int) -> tuple[str, str]:
    stem = f"{split}_d{domain_id}_{index:05d}.pgm"
    return f"images/{stem}", f"masks/{stem}"


def generate_dataset(config, resolution: int, seed: int, out_dir) -> Path:
    """Write a dataset to disk; returns the manifest path.

    ``config`` is a list of (DomainSpec, n_train, n_test) triples. Images
    land under images/, masks under masks/, plus manifest.json. Identical
    arguments always produce byte-identical files.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise FilesystemError(f"cannot create dataset directories under "
                              f"{out}: {e}") from e

    jobs = []
    for domain_id, (spec, n_train, n_test) in enumerate(config):
        if n_train < 1 or n_test < 1:
            raise ConfigError(f"domain {spec.name!r} needs at least one "
                              "sample per split")
        for split, count in (("train", n_train), ("test", n_test)):
            jobs.extend((domain_id, spec, split, i) for i in range(count))

    def render(job):
        domain_id, spec, split, index = job
        rng = sample_rng(seed, domain_id, split, index)
        sample = generate_sample(spec, resolution, rng, domain_id)
        img_rel, mask_rel = _relpaths(split, domain_id, index)
        try:
            write_pgm(out / img_rel, sample.image)
            write_mask_pgm(out / mask_rel, sample.mask)
        except OSError as e:
            raise FilesystemError(f"cannot write {out / img_rel}: {e}") from e
        return {"image": img_rel, "mask": mask_rel, "domain_id": domain_id,
                "split": split, "index": index}

    entries = thread_map(render, jobs)

    manifest = {
        "seed": seed,
        "resolution": resolution,
        "domains": [spec.name for spec, _, _ in config],
        "entries": entries,
    }
    manifest_path = out / "manifest.json"
    try:
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as e:
        raise FilesystemError(f"cannot write {manifest_path}: {e}") from e
    return manifest_path


def load_dataset(manifest_path, split: str) -> Dataset:
    """Load one split of a generated dataset back into memory."""
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as e:
        raise FilesystemError(f"cannot read {manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: invalid manifest JSON: {e}") from None

    root = manifest_path.parent
    names = manifest["domains"]
    by_domain: list[list[ImageSample]] = [[] for _ in names]
    entries = [e for e in manifest["entries"] if e["split"] == split]
    for e in sorted(entries, key=lambda e: (e["domain_id"], e["index"])):
        d = e["domain_id"]
        if not 0 <= d < len(names):
            raise DataError(f"manifest entry references domain {d}, "
                            f"but only {len(names)} domains are declared")
        image = read_image(root / e["image"])
        mask = read_mask(root / e["mask"])
        if image.shape != mask.shape:
            raise DataError(f"{e['image']}: image {image.shape} and mask "
                            f"{mask.shape} disagree")
        by_domain[d].append(ImageSample(image, mask, d))
    return Dataset(list(names), split, manifest["seed"], by_domain)


def domain_arrays(dataset: Dataset) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stack a split into per-domain (images (N,1,H,W) f32, masks (N,H,W) u8)."""
    out = []
    for samples in dataset.by_domain:
        if not samples:
            out.append((np.zeros((0, 1, 0, 0), np.float32),
                        np.zeros((0, 0, 0), np.uint8)))
            continue
        images = np.stack([s.image for s in samples])[:, None]
        masks = np.stack([s.mask for s in samples])
        out.append((images, masks))
    return out
