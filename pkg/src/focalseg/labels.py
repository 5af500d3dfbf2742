"""Boundary labels: contour extraction and Gaussian soft heatmaps."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .tensor import DimensionError, ParameterError

DEFAULT_SIGMA = 1.6


def _as_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DimensionError(f"mask must be 2-d, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    return m.astype(bool)


def contour_map(mask) -> np.ndarray:
    """Boolean map of foreground pixels with a background (or out-of-bounds) 4-neighbour."""
    m = _as_mask(mask)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def extract_contour(mask) -> np.ndarray:
    """Contour pixel coordinates as an (n, 2) integer array of (row, col), row-major order."""
    return np.argwhere(contour_map(mask))


def _contour_grid(contour, shape) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if isinstance(contour, np.ndarray) and contour.dtype == bool:
        if contour.shape != shape:
            raise DimensionError(f"contour map shape {contour.shape} != {shape}")
        return contour
    pts = np.asarray(contour, dtype=np.int64).reshape(-1, 2)
    if pts.size and ((pts < 0).any() or (pts >= np.array(shape)).any()):
        raise DimensionError(f"contour points fall outside an image of shape {shape}")
    grid = np.zeros(shape, dtype=bool)
    grid[pts[:, 0], pts[:, 1]] = True
    return grid


def gaussian_heatmap(contour, shape, sigma: float = DEFAULT_SIGMA, compose: str = "max") -> np.ndarray:
    """Soft boundary label H(p) built from a Gaussian around every contour point.

    ``contour`` is either an (n, 2) coordinate array or a boolean map.  With
    ``compose="max"`` the per-point Gaussians are combined by pointwise maximum,
    which equals ``exp(-d(p)^2 / 2 sigma^2)`` for the Euclidean distance ``d`` to
    the nearest contour point, so it is evaluated through a distance transform.
    ``compose="sum"`` adds the Gaussians and clips at 1 (sensitivity variant).
    """
    sigma = float(sigma)
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    if compose not in ("max", "sum"):
        raise ParameterError(f"compose must be 'max' or 'sum', got {compose!r}")
    grid = _contour_grid(contour, shape)
    if not grid.any():
        return np.zeros(grid.shape, dtype=np.float64)
    if compose == "max":
        d = ndimage.distance_transform_edt(~grid)
        return np.exp(-(d * d) / (2.0 * sigma * sigma))
    rows, cols = np.indices(grid.shape)
    out = np.zeros(grid.shape, dtype=np.float64)
    for r, c in np.argwhere(grid):
        out += np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2.0 * sigma * sigma))
    return np.minimum(out, 1.0)


def mask_to_heatmap(mask, sigma: float = DEFAULT_SIGMA, compose: str = "max") -> np.ndarray:
    m = _as_mask(mask)
    return gaussian_heatmap(contour_map(m), m.shape, sigma, compose)
