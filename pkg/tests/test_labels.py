import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from focalseg.labels import DEFAULT_SIGMA, contour_map, extract_contour, gaussian_heatmap, mask_to_heatmap
from focalseg.tensor import DimensionError, ParameterError
from oracles import contour_oracle, heatmap_oracle

masks = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1))


def test_contour_examples():
    assert extract_contour(np.zeros((5, 5), np.uint8)).shape == (0, 2)
    one = np.zeros((5, 5), np.uint8)
    one[2, 3] = 1
    assert extract_contour(one).tolist() == [[2, 3]]
    sq = np.zeros((9, 9), np.uint8)
    sq[3:6, 3:6] = 1
    pts = {tuple(p) for p in extract_contour(sq)}
    assert len(pts) == 8 and (4, 4) not in pts
    full = np.ones((3, 3), np.uint8)  # the image border counts as background
    assert {tuple(p) for p in extract_contour(full)} == contour_oracle(full)


@settings(max_examples=100, deadline=None)
@given(masks)
def test_contour_matches_neighbour_oracle(mask):
    assert {tuple(p) for p in extract_contour(mask)} == contour_oracle(mask)


def test_heatmap_examples():
    h = gaussian_heatmap([(10, 10)], (21, 21))
    assert h[10, 10] == 1.0
    assert gaussian_heatmap([(0, 0)], (8, 8), sigma=DEFAULT_SIGMA)[0, 0] == 1.0
    assert not gaussian_heatmap(np.zeros((0, 2)), (5, 5)).any()
    with pytest.raises(ParameterError):
        gaussian_heatmap([(0, 0)], (3, 3), sigma=0.0)
    with pytest.raises(ParameterError):
        gaussian_heatmap([(0, 0)], (3, 3), sigma=-1.0)
    with pytest.raises(DimensionError):
        gaussian_heatmap([(5, 0)], (3, 3))


def test_value_at_distance_sigma():
    # 1.6 is not a lattice distance, so place the grid at 0.32 px spacing: offset (3, 4) cells = 1.6 px
    h = gaussian_heatmap([(0, 0)], (6, 6), sigma=DEFAULT_SIGMA / 0.32)
    assert abs(h[3, 4] - math.exp(-0.5)) < 1e-6
    assert abs(h[3, 4] - 0.6065) < 1e-4
    # on the unit lattice: a point 2 px away with sigma 2
    assert abs(gaussian_heatmap([(0, 0)], (4, 4), sigma=2.0)[0, 2] - math.exp(-0.5)) < 1e-12


def test_monotone_decay_single_point():
    h = gaussian_heatmap([(0, 0)], (1, 30))[0]
    assert np.all(np.diff(h) < 0)


@settings(max_examples=100, deadline=None)
@given(masks, st.floats(0.3, 4.0))
def test_heatmap_matches_pointwise_max_oracle(mask, sigma):
    pts = contour_oracle(mask)
    np.testing.assert_allclose(mask_to_heatmap(mask, sigma), heatmap_oracle(pts, mask.shape, sigma), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(masks)
def test_heatmap_invariants(mask):
    h = mask_to_heatmap(mask)
    cm = contour_map(mask)
    assert h.min() >= 0 and h.max() <= 1
    assert np.all(h[cm] == 1.0)
    assert (h.max() == 1.0) == bool(mask.any())
    assert (not h.any()) == (not mask.any())
    for flip in (np.fliplr, np.flipud, np.transpose):
        np.testing.assert_array_equal(mask_to_heatmap(flip(mask)), flip(h))
    # locality: beyond 5 sigma from every contour point the value is below exp(-12.5)
    pts = np.argwhere(cm)
    if len(pts):
        rows, cols = np.indices(mask.shape)
        d = np.min([np.hypot(rows - r, cols - c) for r, c in pts], axis=0)
        far = d > 5 * DEFAULT_SIGMA
        assert np.all(h[far] < math.exp(-12.5))


def test_sum_composition_is_clipped_and_dominates_max():
    mask = np.zeros((12, 12), np.uint8)
    mask[3:9, 3:9] = 1
    hm = mask_to_heatmap(mask, compose="max")
    hs = mask_to_heatmap(mask, compose="sum")
    assert hs.max() <= 1.0
    assert np.all(hs >= hm - 1e-12)
    assert np.any(hs > hm + 1e-6)
    with pytest.raises(ParameterError):
        mask_to_heatmap(mask, compose="mean")


def test_bool_map_and_coordinates_agree():
    mask = np.zeros((10, 10), np.uint8)
    mask[2:7, 3:8] = 1
    cm = contour_map(mask)
    np.testing.assert_array_equal(gaussian_heatmap(cm, cm.shape), gaussian_heatmap(np.argwhere(cm), cm.shape))


def test_mask_validation():
    with pytest.raises(ValueError):
        contour_map(np.array([[0, 2]]))
    with pytest.raises(DimensionError):
        contour_map(np.zeros((2, 2, 2)))
