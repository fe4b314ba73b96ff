"""Synthetic nine-region box atlas.

Axis convention for every volume in this package: axis 0 runs inferior ->
superior (axial slices), axis 1 posterior -> anterior (coronal slices),
axis 2 left -> right (sagittal slices). Coordinates below are fractions of
the volume extent along (axis0, axis1, axis2).

Regions are axis-aligned boxes evaluated in priority order; the first box
containing a voxel claims it, so labels are disjoint and together tile the
whole grid.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

REGIONS = ("caudate", "cerebellum", "frontal", "insula", "occipital",
           "parietal", "putamen", "temporal", "thalamus")

# (region, (z0, z1), (y0, y1), (x0, x1)), half-open, highest priority first
_BOXES = (
    ("caudate", (0.40, 0.60), (0.55, 0.70), (0.35, 0.65)),
    ("putamen", (0.40, 0.60), (0.45, 0.55), (0.35, 0.65)),
    ("thalamus", (0.40, 0.60), (0.30, 0.45), (0.35, 0.65)),
    ("insula", (0.35, 0.60), (0.30, 0.70), (0.20, 0.80)),
    ("cerebellum", (0.00, 0.35), (0.00, 0.40), (0.00, 1.00)),
    ("temporal", (0.00, 0.40), (0.40, 1.00), (0.00, 1.00)),
    ("frontal", (0.35, 1.00), (0.60, 1.00), (0.00, 1.00)),
    ("occipital", (0.35, 1.00), (0.00, 0.30), (0.00, 1.00)),
    ("parietal", (0.35, 1.00), (0.30, 0.60), (0.00, 1.00)),
)


@lru_cache(maxsize=8)
def _atlas(shape: tuple[int, int, int]) -> np.ndarray:
    grids = [(np.arange(n) + 0.5) / n for n in shape]
    z, y, x = np.meshgrid(*grids, indexing="ij")
    out = np.full(shape, -1, dtype=np.int8)
    for name, (z0, z1), (y0, y1), (x0, x1) in _BOXES:
        inside = (z >= z0) & (z < z1) & (y >= y0) & (y < y1) & (x >= x0) & (x < x1) & (out < 0)
        out[inside] = REGIONS.index(name)
    out.setflags(write=False)
    return out


def atlas_labels(shape) -> np.ndarray:
    """Region index per voxel (0..8, ordered as REGIONS). Read-only."""
    return _atlas(tuple(int(s) for s in shape))


def brain_mask(shape, semi_axes=(0.42, 0.44, 0.38)) -> np.ndarray:
    """Ellipsoidal brain centred in the grid; semi-axes as fractions of each extent."""
    grids = [(np.arange(n) + 0.5) / n - 0.5 for n in shape]
    z, y, x = np.meshgrid(*grids, indexing="ij")
    a, b, c = semi_axes
    return (z / a) ** 2 + (y / b) ** 2 + (x / c) ** 2 <= 1.0
