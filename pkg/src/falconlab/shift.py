"""Graded image perturbations on a 0..90 relative-strength grid.

Each kind maps a level to an absolute magnitude by linear interpolation
between its ``(min_mag, max_mag)`` range; ``min_mag`` is always the identity.
Geometric kinds inverse-map every output pixel about the image centre and
sample bilinearly, reading 0 outside the frame. Noise kinds are seeded per
``(seed, kind, level, sample index)`` and clipped back to [0, 1].

Default ranges (override with :func:`load_ranges`):

=============== ============== ==============================================
kind            range          magnitude meaning
=============== ============== ==============================================
rotation        0 .. 120       degrees, counter-clockwise
x-shift         0 .. 14        pixels to the right
y-shift         0 .. 14        pixels down
x-zoom          1 .. 3         horizontal zoom-out factor (content shrinks)
y-zoom          1 .. 3         vertical zoom-out factor
shear           0 .. 1.5       horizontal shear coefficient
gaussian-noise  0 .. 0.9       noise standard deviation
salt-pepper     0 .. 0.9       fraction of pixels replaced by 0 or 1
gaussian-blur   0 .. 3         blur standard deviation in pixels
=============== ============== ==============================================
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .errors import ConfigError, DimensionError, RegistryError

SCHEMA_VERSION = 1

DEFAULT_RANGES: dict[str, tuple[float, float]] = {
    "rotation": (0.0, 120.0),
    "x-shift": (0.0, 14.0),
    "y-shift": (0.0, 14.0),
    "x-zoom": (1.0, 3.0),
    "y-zoom": (1.0, 3.0),
    "shear": (0.0, 1.5),
    "gaussian-noise": (0.0, 0.9),
    "salt-pepper": (0.0, 0.9),
    "gaussian-blur": (0.0, 3.0),
}
KINDS = tuple(DEFAULT_RANGES)
GEOMETRIC = ("rotation", "x-shift", "y-shift", "x-zoom", "y-zoom", "shear")
LEVELS = tuple(range(0, 100, 10))
IDENTITY_MAGNITUDE = {k: (1.0 if "zoom" in k else 0.0) for k in KINDS}


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    level: int
    min_mag: Optional[float] = None
    max_mag: Optional[float] = None

    def __post_init__(self):
        if self.kind not in DEFAULT_RANGES:
            raise RegistryError(f"unknown perturbation kind {self.kind!r}; known: {', '.join(KINDS)}")
        if self.level not in LEVELS:
            raise ConfigError(f"level must be one of {LEVELS}, got {self.level}")
        lo, hi = DEFAULT_RANGES[self.kind]
        object.__setattr__(self, "min_mag", float(lo if self.min_mag is None else self.min_mag))
        object.__setattr__(self, "max_mag", float(hi if self.max_mag is None else self.max_mag))
        if self.max_mag < self.min_mag:
            raise ConfigError(f"{self.kind}: max_mag {self.max_mag} below min_mag {self.min_mag}")

    @classmethod
    def make(cls, kind, level, ranges: Optional[Mapping] = None):
        lo, hi = (ranges or DEFAULT_RANGES).get(kind, (None, None))
        return cls(kind, level, lo, hi)


def level_to_magnitude(spec: PerturbationSpec) -> float:
    return spec.min_mag + (spec.level / 90.0) * (spec.max_mag - spec.min_mag)


def _affine(kind: str, mag: float, h: int, w: int) -> np.ndarray:
    """2x3 map from output ``(col, row, 1)`` to source ``(col, row)``."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    if kind == "rotation":
        t = math.radians(mag)
        # rows grow downwards, so this inverse map turns content counter-clockwise
        a = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    elif kind == "x-zoom":
        a = np.array([[mag, 0.0], [0.0, 1.0]])
    elif kind == "y-zoom":
        a = np.array([[1.0, 0.0], [0.0, mag]])
    elif kind == "shear":
        a = np.array([[1.0, mag], [0.0, 1.0]])
    elif kind == "x-shift":
        return np.array([[1.0, 0.0, -mag], [0.0, 1.0, 0.0]])
    elif kind == "y-shift":
        return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, -mag]])
    else:  # pragma: no cover - guarded by PerturbationSpec
        raise RegistryError(kind)
    centre = np.array([cx, cy])
    return np.hstack([a, (centre - a @ centre)[:, None]])


def _noise_rng(seed: int, kind: str, level: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), KINDS.index(kind), int(level), int(index)])


def perturb_batch(images, spec: PerturbationSpec, seed: int = 0, start_index: int = 0) -> np.ndarray:
    """Apply ``spec`` to every image of an (n, h, w) batch.

    ``start_index`` is the dataset index of ``images[0]``; noise for sample
    ``i`` depends only on ``(seed, kind, level, start_index + i)``.
    """
    x = np.asarray(images)
    if x.ndim != 3:
        raise DimensionError(f"perturbations act on (n, h, w) image batches, got {x.shape}")
    mag = level_to_magnitude(spec)
    if spec.level == 0 or mag == IDENTITY_MAGNITUDE[spec.kind]:
        return x.copy()
    n, h, w = x.shape
    kind = spec.kind
    if kind in GEOMETRIC:
        out = kernels.warp_bilinear(x, _affine(kind, mag, h, w))
    elif kind == "gaussian-blur":
        out = gaussian_filter(x.astype(np.float64), sigma=(0.0, mag, mag), mode="constant", cval=0.0)
    else:
        out = np.empty_like(x, dtype=np.float64)
        for i in range(n):
            rng = _noise_rng(seed, kind, spec.level, start_index + i)
            if kind == "gaussian-noise":
                out[i] = x[i] + rng.normal(0.0, mag, size=(h, w))
            else:
                u = rng.random((h, w))
                salt = rng.random((h, w)) < 0.5
                out[i] = np.where(u < mag, salt.astype(np.float64), x[i])
    return np.clip(out, 0.0, 1.0).astype(x.dtype, copy=False)


def apply_perturbation(image, spec: PerturbationSpec, seed: int = 0, index: int = 0) -> np.ndarray:
    """Perturb a single (h, w) image; see :func:`perturb_batch`."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DimensionError(f"expected an (h, w) image, got {img.shape}")
    return perturb_batch(img[None], spec, seed, index)[0]


def perturbation_suite(
    dataset,
    kinds: Sequence[str],
    levels: Sequence[int] = LEVELS,
    seed: int = 0,
    ranges: Optional[Mapping] = None,
) -> Iterator[tuple]:
    """Yield ``(image, label, kind, level)`` in (kind, level, sample) order."""
    images, labels = dataset.inputs, dataset.labels
    if len(images) == 0 or not kinds:
        raise ConfigError("perturbation suite needs a non-empty dataset and at least one kind")
    for kind in kinds:
        for level in levels:
            batch = perturb_batch(images, PerturbationSpec.make(kind, level, ranges), seed)
            for img, label in zip(batch, labels):
                yield img, int(label), kind, level


def load_ranges(path) -> dict[str, tuple[float, float]]:
    """Read a perturbation config file and merge it over the defaults.

    Schema: ``{"schema_version": 1, "ranges": {"<kind>": [min_mag, max_mag], ...}}``.
    """
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported perturbation schema_version {doc.get('schema_version')!r}")
    merged = dict(DEFAULT_RANGES)
    for kind, pair in doc.get("ranges", {}).items():
        if kind not in DEFAULT_RANGES:
            raise RegistryError(f"{path}: unknown perturbation kind {kind!r}")
        lo, hi = (float(v) for v in pair)
        if hi < lo:
            raise ConfigError(f"{path}: {kind} range [{lo}, {hi}] is reversed")
        merged[kind] = (lo, hi)
    return merged


def dump_ranges(ranges: Optional[Mapping] = None) -> str:
    ranges = ranges or DEFAULT_RANGES
    return json.dumps({"schema_version": SCHEMA_VERSION, "ranges": {k: list(v) for k, v in ranges.items()}}, indent=2)
