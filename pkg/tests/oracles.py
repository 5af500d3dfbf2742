"""Brute-force reference implementations shared by several test modules."""

import math

import numpy as np


def contour_oracle(mask):
    """Neighbour-check loop: foreground with a background or out-of-bounds 4-neighbour."""
    h, w = mask.shape
    out = set()
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not mask[rr, cc]:
                    out.add((r, c))
                    break
    return out


def heatmap_oracle(points, shape, sigma):
    """Pointwise max of per-point Gaussians, evaluated directly."""
    rows, cols = np.indices(shape)
    out = np.zeros(shape)
    for r, c in points:
        out = np.maximum(out, np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sigma ** 2)))
    return out


def dsc_oracle(p, g):
    tp = sum(1 for a, b in zip(p.ravel(), g.ravel()) if a and b)
    n = int(p.sum()) + int(g.sum())
    return 1.0 if n == 0 else 2 * tp / n


def hd_oracle(p, g, q=95.0):
    """Full pairwise distance matrix between loop-extracted boundary sets, then directed percentiles."""
    bp = np.array(sorted(contour_oracle(p)), dtype=float).reshape(-1, 2)
    bg = np.array(sorted(contour_oracle(g)), dtype=float).reshape(-1, 2)
    if len(bp) == 0 or len(bg) == 0:
        return math.nan
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    return max(np.percentile(d.min(1), q), np.percentile(d.min(0), q))
