import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from focalseg import data as D
from focalseg.labels import mask_to_heatmap
from focalseg.metrics import dsc_metric
from focalseg.tensor import ParameterError
from focalseg.tensor.archive import read_raster


def test_generation_is_deterministic():
    spec = D.PhantomSpec(size=48, seed=9)
    a, b = D.generate_phantom(spec, 3), D.generate_phantom(spec, 3)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    np.testing.assert_array_equal(a.heatmap, b.heatmap)
    c = D.generate_phantom(spec, 4)
    assert not np.array_equal(a.image, c.image)
    assert a.id == "case0003"


def test_sample_invariants():
    spec = D.PhantomSpec(size=64, seed=1)
    for i in range(10):
        s = D.generate_phantom(spec, i)
        assert s.image.shape == (1, 64, 64) and s.image.dtype == np.float32
        assert 0 <= s.image.min() and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, 1} and s.mask.any()
        np.testing.assert_array_equal(s.heatmap, mask_to_heatmap(s.mask).astype(np.float32))


def test_default_contrast_is_low():
    spec = D.PhantomSpec(size=64, noise=0.0, blur_range=(0.0, 0.0), texture=0.0)
    assert spec.contrast <= 0.2
    for i in range(5):
        s = D.generate_phantom(spec, i)
        img, m = s.image[0], s.mask.astype(bool)
        assert abs(img[m].mean() - img[~m].mean()) <= 0.2


def test_unit_contrast_threshold_recovers_mask():
    spec = D.PhantomSpec(size=48, contrast=1.0, background_range=(0.0, 0.0), blur_range=(0.0, 0.0),
                         noise=0.0, texture=0.0, seed=2)
    for i in range(5):
        s = D.generate_phantom(spec, i)
        np.testing.assert_array_equal((s.image[0] > 0.0 + 0.5).astype(np.uint8), s.mask)


def test_empty_fraction_one():
    spec = D.PhantomSpec(size=32, empty_fraction=1.0)
    for i in range(4):
        s = D.generate_phantom(spec, i)
        assert not s.mask.any() and not s.heatmap.any()


def test_spec_validation_and_round_trip():
    for bad in (dict(contrast=0.0), dict(axes_range=(0.0, 0.2)), dict(axes_range=(0.3, 0.2)),
                dict(empty_fraction=1.5), dict(noise=-1.0), dict(size=4)):
        with pytest.raises(ParameterError):
            D.PhantomSpec(**bad).validate()
    spec = D.PhantomSpec(size=40, seed=5)
    assert D.PhantomSpec.from_dict(spec.to_dict()) == spec


def test_normalize_intensity_examples():
    x = np.array([[0.0, 0.25, 1.0]])
    np.testing.assert_array_equal(D.normalize_intensity(x, 0, 1), x)
    np.testing.assert_array_equal(D.normalize_intensity(np.full((2, 2), -100.0), -100, 300), 0.0)
    assert D.normalize_intensity(np.array([100.0]), -100, 300)[0] == 0.5
    with pytest.raises(ParameterError):
        D.normalize_intensity(x, 1, 1)


def test_resize_examples():
    np.testing.assert_allclose(D.resize_bilinear(np.array([[0.0], [1.0]]), (3, 1)), [[0.0], [0.5], [1.0]])
    x = np.random.default_rng(0).random((5, 7))
    np.testing.assert_array_equal(D.resize_bilinear(x, (5, 7)), x)
    np.testing.assert_allclose(D.resize_bilinear(np.full((4, 4), 0.3), (9, 13)), 0.3)
    m = np.array([[0, 1], [1, 0]], np.uint8)
    assert set(np.unique(D.resize_bilinear(m, (5, 5), mode="nearest"))) <= {0, 1}
    with pytest.raises(ParameterError):
        D.resize_bilinear(x, (3, 3), mode="cubic")


def test_resize_probs_stays_normalised():
    logits = np.random.default_rng(1).standard_normal((3, 6, 6))
    p = np.exp(logits) / np.exp(logits).sum(0)
    r = D.resize_probs(p, (11, 9))
    np.testing.assert_allclose(r.sum(0), 1.0, atol=1e-6)


TRANSFORMS = list(itertools.product(range(4), (False, True)))


@pytest.mark.parametrize("k,flip", TRANSFORMS)
def test_transforms_commute_with_labels_and_metrics(k, flip):
    spec = D.PhantomSpec(size=40, seed=4)
    s = D.generate_phantom(spec, 0)
    t = D.generate_phantom(spec, 1)
    am = D.apply_transform(s.mask, k, flip)
    np.testing.assert_array_equal(mask_to_heatmap(am), D.apply_transform(mask_to_heatmap(s.mask), k, flip))
    np.testing.assert_array_equal(D.invert_transform(am, k, flip), s.mask)
    assert dsc_metric(am, D.apply_transform(t.mask, k, flip)) == dsc_metric(s.mask, t.mask)
    np.testing.assert_array_equal(np.sort(D.apply_transform(s.image, k, flip).ravel()), np.sort(s.image.ravel()))


def test_augment_applies_one_transform_to_all_fields():
    s = D.generate_phantom(D.PhantomSpec(size=32), 0)
    for seed in range(8):
        a = D.augment(s, np.random.default_rng(seed))
        k, flip = D.draw_transform(np.random.default_rng(seed))
        np.testing.assert_array_equal(a.image, D.apply_transform(s.image, k, flip))
        np.testing.assert_array_equal(a.mask, D.apply_transform(s.mask, k, flip))
        np.testing.assert_array_equal(a.heatmap, D.apply_transform(s.heatmap, k, flip))
        # flipping twice with the same draw is the identity
        np.testing.assert_array_equal(D.apply_transform(D.apply_transform(s.mask, 0, True), 0, True), s.mask)
    b = D.augment(s, np.random.default_rng(0), any_angle=True)
    assert b.image.shape == s.image.shape and 0 <= b.image.min() and b.image.max() <= 1


def test_split_examples():
    assert D.split_sizes(400) == (280, 40, 80)
    tr, va, te = D.split_dataset(400, seed=0)
    assert (len(tr), len(va), len(te)) == (280, 40, 80)
    assert sorted(tr + va + te) == list(range(400))
    assert D.split_dataset(400, seed=0) == (tr, va, te)
    assert D.split_dataset(400, seed=1) != (tr, va, te)
    with pytest.raises(ParameterError):
        D.split_sizes(10, (0.5, 0.5, 0.5))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 500), st.floats(0.05, 0.9), st.floats(0.0, 1.0))
def test_split_sizes_partition(n, a, frac_b):
    b = (1 - a) * frac_b
    sizes = D.split_sizes(n, (a, b, 1 - a - b))
    assert sum(sizes) == n and min(sizes) >= 0
    assert all(abs(s - f * n) < 1 + 1e-9 for s, f in zip(sizes, (a, b, 1 - a - b)))


def test_make_dataset_layout_and_refusal(tmp_path):
    root = tmp_path / "d"
    spec = D.PhantomSpec(size=24, seed=2)
    out = D.make_dataset(root, spec, n_total=20)
    assert {k: len(v) for k, v in out.items()} == {"train": 14, "val": 2, "test": 4}
    rows = D.read_manifest(root)
    assert len(rows) == 20 and all(r["sigma"] == "1.6" for r in rows)
    first = (root / D.MANIFEST).read_bytes()
    with pytest.raises(FileExistsError):
        D.make_dataset(root, spec, n_total=20)
    D.make_dataset(root, spec, n_total=20, force=True)
    assert (root / D.MANIFEST).read_bytes() == first
    other = tmp_path / "e"
    D.make_dataset(other, spec, n_total=20)
    assert (other / D.MANIFEST).read_bytes() == first
    r = rows[0]
    np.testing.assert_array_equal(read_raster(root / r["split"] / f"{r['id']}_mask.raw"),
                                  D.generate_phantom(spec, int(r["index"])).mask)


def test_make_labels_rewrites_heatmaps(tmp_path):
    root = tmp_path / "d"
    D.make_dataset(root, D.PhantomSpec(size=24), n_total=10)
    assert D.make_labels(root, sigma=3.0) == 10
    ds = D.PhantomDataset(root, "train")
    assert ds.sigma == 3.0
    np.testing.assert_allclose(ds.heatmaps[0], mask_to_heatmap(ds.masks[0], 3.0), atol=1e-6)
    with pytest.raises(FileNotFoundError):
        D.make_labels(tmp_path / "missing")


def test_dataset_resizes_on_load(tiny_data):
    ds = D.PhantomDataset(tiny_data, "val", size=(16, 16))
    assert ds.images.shape == (4, 1, 16, 16) and ds.masks.shape == (4, 16, 16)
    assert len(D.PhantomDataset(tiny_data, "train")) == 28
    with pytest.raises(ValueError):
        D.PhantomDataset(tiny_data, "holdout")


def test_batch_loader_deterministic_and_thread_independent(tiny_data):
    ds = D.PhantomDataset(tiny_data, "train")
    threaded = D.BatchLoader(ds, 8, seed=3, prefetch=2)
    plain = D.BatchLoader(ds, 8, seed=3, threaded=False)
    assert len(threaded) == 4
    for epoch in (0, 1):
        a, b = list(threaded.epoch(epoch)), list(plain.epoch(epoch))
        assert [x.ids for x in a] == [x.ids for x in b]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.images, y.images)
            np.testing.assert_array_equal(x.masks, y.masks)
        assert sorted(sum((x.ids for x in a), [])) == sorted(ds.ids)
        assert [x.images.shape[0] for x in a] == [8, 8, 8, 4]
    assert [x.ids for x in threaded.epoch(0)] != [x.ids for x in threaded.epoch(1)]


def test_batch_loader_early_exit_and_errors(tiny_data):
    ds = D.PhantomDataset(tiny_data, "train")
    loader = D.BatchLoader(ds, 2, prefetch=1)
    it = loader.epoch(0)
    next(it)
    it.close()  # consumer stops early: producer must shut down without hanging
    with pytest.raises(ParameterError):
        D.BatchLoader(ds, 0)
