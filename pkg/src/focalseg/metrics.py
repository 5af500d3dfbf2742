"""Overlap and boundary-distance metrics, per-case records and CSV reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .labels import contour_map
from .tensor import DimensionError

FLAG_BOTH_EMPTY = "both_empty"
FLAG_PRED_EMPTY = "pred_empty"
FLAG_GT_EMPTY = "gt_empty"
FLAG_HD_UNDEFINED = "hd_undefined"

CSV_HEADER = ("case_id", "dsc", "hd95_px", "hd95_mm", "flags")


def _pair(p, g) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(p), np.asarray(g)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p.astype(bool), g.astype(bool)


def dsc_metric(pred, gt) -> float:
    """2|P n G| / (|P| + |G|); two empty masks score 1."""
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def _spacing(spacing, ndim: int) -> tuple[float, ...]:
    if spacing is None:
        return (1.0,) * ndim
    if np.isscalar(spacing):
        return (float(spacing),) * ndim
    sp = tuple(float(s) for s in spacing)
    if len(sp) != ndim:
        raise DimensionError(f"spacing {sp} does not match {ndim}-d masks")
    return sp


def directed_distances(src: np.ndarray, dst: np.ndarray, spacing=None) -> np.ndarray:
    """Distance from every True pixel of ``src`` to the nearest True pixel of ``dst``."""
    sp = _spacing(spacing, src.ndim)
    d = ndimage.distance_transform_edt(~dst, sampling=sp)
    return d[src]


def hd95_metric(pred, gt, spacing=None, percentile: float = 95.0) -> float:
    """Max of the two directed 95th-percentile boundary distances (linear interpolation).

    Returns NaN when either mask is empty.
    """
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        return math.nan
    bp, bg = contour_map(p), contour_map(g)
    d_pg = directed_distances(bp, bg, spacing)
    d_gp = directed_distances(bg, bp, spacing)
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


def hausdorff(pred, gt, spacing=None) -> float:
    """Full (100th percentile) boundary Hausdorff distance."""
    return hd95_metric(pred, gt, spacing, percentile=100.0)


@dataclass
class MetricsRecord:
    case_id: str
    dsc: float
    hd95: float  # pixels
    hd95_mm: float | None = None
    flags: tuple[str, ...] = field(default_factory=tuple)

    @property
    def hd_defined(self) -> bool:
        return FLAG_HD_UNDEFINED not in self.flags

    def row(self) -> list[str]:
        return [self.case_id, _fmt(self.dsc), _fmt(self.hd95), _fmt(self.hd95_mm), ";".join(self.flags)]


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return "nan" if math.isnan(v) else f"{v:.6f}"


def evaluate_case(case_id: str, pred, gt, spacing=None) -> MetricsRecord:
    p, g = _pair(pred, gt)
    flags = []
    if not p.any() and not g.any():
        flags.append(FLAG_BOTH_EMPTY)
    elif not p.any():
        flags.append(FLAG_PRED_EMPTY)
    elif not g.any():
        flags.append(FLAG_GT_EMPTY)
    hd_px = hd95_metric(p, g)
    if math.isnan(hd_px):
        flags.append(FLAG_HD_UNDEFINED)
    hd_mm = None if spacing is None else hd95_metric(p, g, spacing)
    return MetricsRecord(str(case_id), dsc_metric(p, g), hd_px, hd_mm, tuple(flags))


@dataclass
class Aggregate:
    n: int
    dsc_mean: float
    dsc_std: float
    hd95_mean: float
    hd95_std: float
    hd95_mm_mean: float | None
    hd95_mm_std: float | None
    hd_excluded: int


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate(records: Iterable[MetricsRecord]) -> Aggregate:
    """Mean and population standard deviation; undefined HD rows are excluded and counted."""
    records = list(records)
    dm, ds = _mean_std([r.dsc for r in records])
    defined = [r for r in records if r.hd_defined]
    hm, hs = _mean_std([r.hd95 for r in defined])
    mm = [r.hd95_mm for r in defined if r.hd95_mm is not None]
    mmm, mms = _mean_std(mm) if mm else (None, None)
    return Aggregate(len(records), dm, ds, hm, hs, mmm, mms, len(records) - len(defined))


def write_metrics_csv(path, records: Sequence[MetricsRecord]) -> Aggregate:
    """Per-case rows followed by ``mean`` and ``std`` aggregate rows."""
    agg = aggregate(records)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_HEADER)
        for r in records:
            wr.writerow(r.row())
        note = f"n={agg.n};hd_excluded={agg.hd_excluded}"
        wr.writerow(["mean", _fmt(agg.dsc_mean), _fmt(agg.hd95_mean), _fmt(agg.hd95_mm_mean), note])
        wr.writerow(["std", _fmt(agg.dsc_std), _fmt(agg.hd95_std), _fmt(agg.hd95_mm_std), note])
    return agg


def read_metrics_csv(path) -> tuple[list[dict], dict[str, dict]]:
    """Return (per-case rows, aggregate rows keyed by 'mean' / 'std')."""
    cases, aggs = [], {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["case_id"] in ("mean", "std"):
                aggs[row["case_id"]] = row
            else:
                cases.append(row)
    return cases, aggs
