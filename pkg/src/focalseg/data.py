"""Synthetic low-contrast phantoms, preprocessing, augmentation and dataset I/O."""

from __future__ import annotations

import csv
import json
import math
import queue
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .labels import DEFAULT_SIGMA, mask_to_heatmap
from .tensor import DimensionError, ParameterError
from .tensor.archive import read_raster, write_raster

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)
MANIFEST = "manifest.csv"
SPEC_FILE = "phantom_spec.json"


@dataclass(frozen=True)
class PhantomSpec:
    """Generation parameters; together with ``seed`` they fully determine a dataset.

    Lengths are fractions of the image side unless noted.  ``contrast`` is the
    foreground intensity offset before blur and noise.
    """

    size: int = 128
    center_range: tuple[float, float] = (0.35, 0.65)
    axes_range: tuple[float, float] = (0.14, 0.28)
    rotation_range: tuple[float, float] = (0.0, math.pi)
    background_range: tuple[float, float] = (0.35, 0.55)
    contrast: float = 0.15
    blur_range: tuple[float, float] = (0.5, 1.5)  # gaussian sigma in pixels
    noise: float = 0.04
    texture: float = 0.04  # amplitude of smooth background variation
    irregularity: float = 0.12
    harmonics: int = 4
    empty_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.size < 8:
            raise ParameterError(f"image size must be >= 8, got {self.size}")
        lo, hi = self.axes_range
        if not 0 < lo <= hi <= 0.5:
            raise ParameterError(f"axes_range must satisfy 0 < lo <= hi <= 0.5, got {self.axes_range}")
        if not 0 < self.contrast <= 1:
            raise ParameterError(f"contrast must lie in (0, 1], got {self.contrast}")
        if not 0 <= self.empty_fraction <= 1:
            raise ParameterError(f"empty_fraction must lie in [0, 1], got {self.empty_fraction}")
        if self.noise < 0 or self.texture < 0 or min(self.blur_range) < 0:
            raise ParameterError("noise, texture and blur must be non-negative")
        if not 0 <= self.irregularity < 1:
            raise ParameterError(f"irregularity must lie in [0, 1), got {self.irregularity}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) in [0, 1]
    mask: np.ndarray  # (H, W) uint8
    heatmap: np.ndarray  # (H, W) in [0, 1]
    id: str = ""
    meta: dict = field(default_factory=dict)


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def phantom_mask(size: int, center, axes, angle: float, coeffs: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """Interior of an ellipse whose radius is modulated by a few low harmonics."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - center[0], xx - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = (c * dx + s * dy) / axes[1]
    v = (-s * dx + c * dy) / axes[0]
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    k = np.arange(2, 2 + len(coeffs))
    radius = 1.0 + (coeffs[:, None, None] * np.cos(k[:, None, None] * theta + phases[:, None, None])).sum(0)
    return (rho <= radius).astype(np.uint8)


def generate_phantom(spec: PhantomSpec, index: int, sigma: float = DEFAULT_SIGMA) -> Sample:
    """Deterministic phantom number ``index`` of the dataset described by ``spec``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    empty = rng.random() < spec.empty_fraction
    center = (n * _uniform(rng, spec.center_range), n * _uniform(rng, spec.center_range))
    axes = (n * _uniform(rng, spec.axes_range), n * _uniform(rng, spec.axes_range))
    angle = _uniform(rng, spec.rotation_range)
    coeffs = rng.uniform(-1, 1, spec.harmonics) * spec.irregularity / max(1, spec.harmonics)
    phases = rng.uniform(0, 2 * math.pi, spec.harmonics)
    background = _uniform(rng, spec.background_range)
    blur = _uniform(rng, spec.blur_range)
    field_ = rng.standard_normal((n, n))
    noise = rng.standard_normal((n, n))

    mask = np.zeros((n, n), np.uint8) if empty else phantom_mask(n, center, axes, angle, coeffs, phases)
    img = np.full((n, n), background) + spec.contrast * mask
    if spec.texture > 0:
        smooth = ndimage.gaussian_filter(field_, n / 8.0, mode="wrap")
        smooth /= max(np.abs(smooth).max(), 1e-12)
        img += spec.texture * smooth
    if blur > 0:
        img = ndimage.gaussian_filter(img, blur, mode="nearest")
    img = np.clip(img + spec.noise * noise, 0.0, 1.0)
    heat = mask_to_heatmap(mask, sigma)
    meta = {"empty": bool(empty), "background": background, "blur": blur}
    return Sample(img[None].astype(np.float32), mask, heat.astype(np.float32), f"case{index:04d}", meta)


# -- preprocessing ----------------------------------------------------------------

def normalize_intensity(image, lo: float, hi: float) -> np.ndarray:
    """Clip to [lo, hi] and map linearly onto [0, 1]."""
    if not hi > lo:
        raise ParameterError(f"normalize_intensity needs hi > lo, got lo={lo}, hi={hi}")
    img = np.asarray(image, dtype=np.float64)
    return (np.clip(img, lo, hi) - lo) / (hi - lo)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    # corner-aligned: first and last samples coincide with the input's
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(image, size: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    """Resize the last two axes to ``size`` on a corner-aligned grid.

    ``mode="nearest"`` is used for masks (ties round half up).
    """
    arr = np.asarray(image)
    if arr.ndim < 2:
        raise DimensionError(f"resize needs at least 2 axes, got {arr.shape}")
    th, tw = (int(s) for s in size)
    if th < 1 or tw < 1:
        raise ParameterError(f"target size must be positive, got {size}")
    h, w = arr.shape[-2:]
    if (h, w) == (th, tw):
        return arr.copy()
    ys, xs = _axis_coords(h, th), _axis_coords(w, tw)
    if mode == "nearest":
        yi = np.minimum(np.floor(ys + 0.5).astype(int), h - 1)
        xi = np.minimum(np.floor(xs + 0.5).astype(int), w - 1)
        return arr[..., yi[:, None], xi[None, :]]
    if mode != "bilinear":
        raise ParameterError(f"unknown resize mode {mode!r}")
    arr = arr.astype(np.float64)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    top = arr[..., y0[:, None], x0[None, :]] * (1 - fx) + arr[..., y0[:, None], x1[None, :]] * fx
    bot = arr[..., y1[:, None], x0[None, :]] * (1 - fx) + arr[..., y1[:, None], x1[None, :]] * fx
    return top * (1 - fy) + bot * fy


def resize_probs(probs, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a (K, H, W) probability map, then renormalize each pixel to sum 1."""
    out = resize_bilinear(probs, size)
    return out / out.sum(axis=-3, keepdims=True)


# -- augmentation -------------------------------------------------------------------

def apply_transform(arr: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Rotate the last two axes by k*90 degrees, then optionally flip horizontally."""
    out = np.rot90(arr, k, axes=(-2, -1))
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def invert_transform(arr: np.ndarray, k: int, flip: bool) -> np.ndarray:
    out = arr[..., ::-1] if flip else arr
    return np.ascontiguousarray(np.rot90(out, -k, axes=(-2, -1)))


def draw_transform(rng: np.random.Generator) -> tuple[int, bool]:
    return int(rng.integers(4)), bool(rng.integers(2))


def augment(sample: Sample, rng: np.random.Generator, any_angle: bool = False) -> Sample:
    """Random right-angle rotation plus optional flip, identical for image, mask and heatmap.

    ``any_angle`` draws a uniform rotation angle instead (bilinear for image and
    heatmap, nearest-neighbour for the mask); that path is not exact.
    """
    if any_angle:
        angle = float(rng.uniform(0, 360))
        flip = bool(rng.integers(2))
        rot = lambda a, order: ndimage.rotate(a, angle, axes=(-1, -2), reshape=False, order=order, mode="nearest")  # noqa: E731
        img, mask, heat = rot(sample.image, 1), rot(sample.mask, 0), rot(sample.heatmap, 1)
        if flip:
            img, mask, heat = img[..., ::-1], mask[..., ::-1], heat[..., ::-1]
        return replace(sample, image=np.ascontiguousarray(np.clip(img, 0, 1)), mask=np.ascontiguousarray(mask),
                       heatmap=np.ascontiguousarray(np.clip(heat, 0, 1)))
    k, flip = draw_transform(rng)
    return replace(sample, image=apply_transform(sample.image, k, flip),
                   mask=apply_transform(sample.mask, k, flip), heatmap=apply_transform(sample.heatmap, k, flip))


# -- splits and persistence ----------------------------------------------------------

def split_sizes(n_total: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> tuple[int, ...]:
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or len(fr) != 3 or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ParameterError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    if n_total < 0:
        raise ParameterError(f"n_total must be >= 0, got {n_total}")
    raw = fr * n_total
    sizes = np.floor(raw + 1e-9).astype(int)
    # largest remainder for whatever rounding left over
    for i in np.argsort(-(raw - sizes), kind="stable")[: n_total - sizes.sum()]:
        sizes[i] += 1
    return tuple(int(s) for s in sizes)


def split_dataset(n_total: int, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0):
    """Random disjoint (train, val, test) index lists, each sorted."""
    sizes = split_sizes(n_total, fractions)
    perm = np.random.default_rng(seed).permutation(n_total)
    a, b = sizes[0], sizes[0] + sizes[1]
    return tuple(sorted(int(i) for i in part) for part in (perm[:a], perm[a:b], perm[b:]))


def _paths(root: Path, split: str, case_id: str) -> dict[str, Path]:
    base = root / split
    return {k: base / f"{case_id}_{k}.raw" for k in ("image", "mask", "heatmap")}


def make_dataset(root, spec: PhantomSpec, n_total: int = 400, fractions=DEFAULT_FRACTIONS,
                 sigma: float = DEFAULT_SIGMA, force: bool = False) -> dict[str, list[str]]:
    """Write phantoms, split directories, heatmaps and the manifest under ``root``."""
    root = Path(root)
    spec.validate()
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} exists and is not empty; pass force to overwrite")
    splits = split_dataset(n_total, fractions, spec.seed)
    for split in SPLITS:
        (root / split).mkdir(parents=True, exist_ok=True)
    rows, out = [], {s: [] for s in SPLITS}
    for split, ids in zip(SPLITS, splits):
        for index in ids:
            s = generate_phantom(spec, index, sigma)
            p = _paths(root, split, s.id)
            write_raster(p["image"], s.image)
            write_raster(p["mask"], s.mask)
            write_raster(p["heatmap"], s.heatmap)
            rows.append((s.id, split, spec.seed, index))
            out[split].append(s.id)
    (root / SPEC_FILE).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    write_manifest(root, rows, sigma)
    return out


def write_manifest(root, rows, sigma: float) -> None:
    with open(Path(root) / MANIFEST, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "split", "seed", "index", "sigma"])
        for r in rows:
            wr.writerow(list(r) + [repr(float(sigma))])


def read_manifest(root) -> list[dict]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def make_labels(root, sigma: float = DEFAULT_SIGMA) -> int:
    """Recompute every heatmap from its mask with ``sigma``; returns the number rewritten."""
    root = Path(root)
    rows = read_manifest(root)
    for r in rows:
        p = _paths(root, r["split"], r["id"])
        mask = read_raster(p["mask"]).astype(np.uint8)
        write_raster(p["heatmap"], mask_to_heatmap(mask, sigma).astype(np.float32))
    write_manifest(root, [(r["id"], r["split"], r["seed"], r["index"]) for r in rows], sigma)
    return len(rows)


class PhantomDataset:
    """All samples of one split, held in memory as stacked arrays."""

    def __init__(self, root, split: str, size: tuple[int, int] | None = None):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        self.root = Path(root)
        self.split = split
        rows = [r for r in read_manifest(self.root) if r["split"] == split]
        self.ids = [r["id"] for r in rows]
        self.sigma = float(rows[0]["sigma"]) if rows else DEFAULT_SIGMA
        imgs, masks, heats = [], [], []
        for cid in self.ids:
            p = _paths(self.root, split, cid)
            img, mask, heat = read_raster(p["image"]), read_raster(p["mask"]), read_raster(p["heatmap"])
            if size is not None and tuple(mask.shape) != tuple(size):
                img = resize_bilinear(img, size)
                heat = resize_bilinear(heat, size)
                mask = resize_bilinear(mask, size, mode="nearest")
            imgs.append(img)
            masks.append(mask)
            heats.append(heat)
        n = len(self.ids)
        hw = tuple(masks[0].shape) if n else (0, 0)
        self.images = np.stack(imgs).astype(np.float32) if n else np.zeros((0, 1) + hw, np.float32)
        self.masks = np.stack(masks).astype(np.uint8) if n else np.zeros((0,) + hw, np.uint8)
        self.heatmaps = np.stack(heats).astype(np.float32) if n else np.zeros((0,) + hw, np.float32)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.masks[i], self.heatmaps[i], self.ids[i])


@dataclass
class Batch:
    images: np.ndarray  # (B, 1, H, W)
    masks: np.ndarray  # (B, H, W)
    heatmaps: np.ndarray  # (B, 1, H, W)
    ids: list[str]


def _assemble(samples: Sequence[Sample]) -> Batch:
    return Batch(np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]),
                 np.stack([s.heatmap for s in samples])[:, None], [s.id for s in samples])


def batch_order(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool) -> list[np.ndarray]:
    idx = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)]


class BatchLoader:
    """Bounded producer/consumer batch iterator.

    A background thread assembles (and augments) batches into a queue of at
    most ``prefetch`` items.  Batch composition and augmentation draws depend
    only on (seed, epoch, position), so the stream is identical with or
    without the thread.
    """

    def __init__(self, dataset: PhantomDataset, batch_size: int, seed: int = 0, shuffle: bool = True,
                 augment_data: bool = True, prefetch: int = 2, threaded: bool = True):
        if batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.augment_data = augment_data
        self.prefetch = max(1, prefetch)
        self.threaded = threaded

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def _make(self, epoch: int, pos: int, idx: np.ndarray) -> Batch:
        samples = [self.dataset[int(i)] for i in idx]
        if self.augment_data:
            samples = [augment(s, np.random.default_rng([self.seed, epoch, pos, j])) for j, s in enumerate(samples)]
        return _assemble(samples)

    def epoch(self, epoch: int) -> Iterator[Batch]:
        order = batch_order(len(self.dataset), self.batch_size, self.seed, epoch, self.shuffle)
        if not self.threaded:
            for pos, idx in enumerate(order):
                yield self._make(epoch, pos, idx)
            return
        q: queue.Queue = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()
        done = object()

        def produce():
            try:
                for pos, idx in enumerate(order):
                    item = self._make(epoch, pos, idx)
                    while not stop.is_set():
                        try:
                            q.put(item, timeout=0.1)
                            break
                        except queue.Full:
                            continue
                    if stop.is_set():
                        return
                q.put(done)
            except BaseException as exc:  # surface producer errors in the consumer
                q.put(exc)

        worker = threading.Thread(target=produce, daemon=True)
        worker.start()
        try:
            while True:
                item = q.get()
                if item is done:
                    break
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            stop.set()
            worker.join(timeout=5)
