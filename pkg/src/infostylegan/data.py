"""Procedural 32x32 shapes with exact ground-truth factors.

Factors (stored as integer indices):

    shape      0 square, 1 ellipse, 2 triangle
    pos_x      0..7   centre column 9 + 2*pos_x
    pos_y      0..7   centre row    9 + 2*pos_y
    scale      0..2   half-extent 4, 6, 8 px
    intensity  0..2   0.5, 0.75, 1.0

Every combination fits inside the canvas, so the whole 1728-image grid is
rendered once and datasets index into it.
"""
from __future__ import annotations

import csv
import functools
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .archive import read_archive, write_archive

SIZE = 32
FACTOR_NAMES = ("shape", "pos_x", "pos_y", "scale", "intensity")
FACTOR_SIZES = (3, 8, 8, 3, 3)
SHAPES = ("square", "ellipse", "triangle")
HALF_EXTENTS = (4.0, 6.0, 8.0)
INTENSITIES = (0.5, 0.75, 1.0)
ORIGIN = 9.0
CELL = 2.0
ELLIPSE_ASPECT = 0.65
_SUPERSAMPLE = 4


@dataclass(frozen=True)
class ShapeFactors:
    shape: int
    pos_x: int
    pos_y: int
    scale: int
    intensity: int

    def __post_init__(self):
        for name, size in zip(FACTOR_NAMES, FACTOR_SIZES):
            v = getattr(self, name)
            if not 0 <= v < size:
                raise ValueError(f"{name} must be in [0, {size}), got {v}")

    def as_row(self) -> Tuple[int, ...]:
        return tuple(getattr(self, n) for n in FACTOR_NAMES)


def _subpixel_grid():
    offs = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    pix = np.arange(SIZE)
    coords = (pix[:, None] + offs[None, :]).reshape(-1)  # SIZE*S sample positions
    return np.meshgrid(coords, coords, indexing="ij")  # (y, x)


_YS, _XS = _subpixel_grid()


def render(factors: ShapeFactors) -> np.ndarray:
    """Anti-aliased rasterization by 4x4 supersampling; returns (1, 32, 32) in [0, 1]."""
    cx = ORIGIN + CELL * factors.pos_x
    cy = ORIGIN + CELL * factors.pos_y
    s = HALF_EXTENTS[factors.scale]
    dx, dy = _XS - cx, _YS - cy
    if factors.shape == 0:
        inside = (np.abs(dx) <= s) & (np.abs(dy) <= s)
    elif factors.shape == 1:
        inside = (dx / s) ** 2 + (dy / (ELLIPSE_ASPECT * s)) ** 2 <= 1.0
    else:
        # upright isosceles: apex (cx, cy - s), base y = cy + s from cx - s to cx + s
        inside = (dy <= s) & (np.abs(dx) <= (dy + s) / 2.0)
    cover = inside.reshape(SIZE, _SUPERSAMPLE, SIZE, _SUPERSAMPLE).sum(axis=(1, 3)) / _SUPERSAMPLE ** 2
    return (cover * INTENSITIES[factors.intensity])[None]


def _flat_index(rows: np.ndarray) -> np.ndarray:
    return np.ravel_multi_index(tuple(np.asarray(rows, dtype=int).T), FACTOR_SIZES)


@functools.lru_cache(maxsize=1)
def full_grid() -> Tuple[np.ndarray, np.ndarray]:
    """All factor combinations (rows) and their images, in ravel order."""
    rows = np.array(np.unravel_index(np.arange(int(np.prod(FACTOR_SIZES))), FACTOR_SIZES)).T
    images = np.stack([render(ShapeFactors(*map(int, r))) for r in rows])
    images.setflags(write=False)
    return rows, images


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, 1, 32, 32)
    factors: np.ndarray  # (n, 5) integer indices
    seed: Optional[int] = None
    indices: Optional[np.ndarray] = None  # rows of the parent dataset, for subsets

    def __len__(self):
        return len(self.factors)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.images[idx], self.factors[idx], self.seed, idx)

    def save(self, path, csv_path=None) -> None:
        write_archive(path, {"images": self.images, "factors": self.factors.astype(np.float64)})
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(("index",) + FACTOR_NAMES)
                for i, row in enumerate(self.factors):
                    w.writerow((i,) + tuple(int(v) for v in row))

    @classmethod
    def load(cls, path) -> "LabeledDataset":
        t = read_archive(path)
        if "images" not in t or "factors" not in t:
            raise ValueError(f"{path}: dataset archive needs tensors 'images' and 'factors'")
        return cls(t["images"], t["factors"].astype(int))


def images_for(rows) -> np.ndarray:
    _, images = full_grid()
    return images[_flat_index(rows)]


def generate(n: int, seed: int) -> LabeledDataset:
    """n i.i.d. uniform factor draws and their renderings."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    rows = np.stack([rng.integers(0, k, size=n) for k in FACTOR_SIZES], axis=1)
    return LabeledDataset(images_for(rows).copy(), rows, seed)


Rule = Callable[[np.ndarray], np.ndarray]


def default_inlier_rule(factors: np.ndarray) -> np.ndarray:
    return factors[:, 0] != 1


def default_outlier_rule(factors: np.ndarray) -> np.ndarray:
    return factors[:, 0] == 1


def anomaly_split(dataset: LabeledDataset, inlier_rule: Rule = default_inlier_rule,
                  outlier_rule: Rule = default_outlier_rule, seed: int = 0,
                  test_per_class: Optional[int] = None):
    """Inlier-only training set and a disjoint test set balanced 50/50.

    Returns ``(train, test, test_is_outlier)``.
    """
    inl = np.flatnonzero(inlier_rule(dataset.factors))
    out = np.flatnonzero(outlier_rule(dataset.factors) & ~inlier_rule(dataset.factors))
    if len(inl) == 0:
        raise ValueError("inlier rule matches no items")
    if len(out) == 0:
        raise ValueError("outlier rule matches no items")
    rng = np.random.default_rng(seed)
    inl, out = rng.permutation(inl), rng.permutation(out)
    if test_per_class is None:
        test_per_class = min(len(out), len(inl) // 2)
    if test_per_class < 1 or test_per_class > len(out) or test_per_class >= len(inl):
        raise ValueError(f"cannot draw {test_per_class} test items per class "
                         f"from {len(inl)} inliers / {len(out)} outliers")
    test_idx = np.concatenate([inl[:test_per_class], out[:test_per_class]])
    train_idx = np.sort(inl[test_per_class:])
    labels = np.concatenate([np.zeros(test_per_class, bool), np.ones(test_per_class, bool)])
    order = rng.permutation(len(test_idx))
    test_idx, labels = test_idx[order], labels[order]
    return dataset.subset(train_idx), dataset.subset(test_idx), labels
