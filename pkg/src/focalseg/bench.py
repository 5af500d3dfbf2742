"""Cost benchmark: focal attention against dense global attention."""

from __future__ import annotations

import csv
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .attention import FocalAttention, FocalConfig, degenerate_config, global_attention
from .tensor import Tensor, no_grad, precision

BENCH_HEADER = ("size", "tokens", "focal_attended", "global_attended", "focal_ms", "global_ms",
                "focal_peak_bytes", "global_peak_bytes", "ratio")


@dataclass
class BenchRow:
    size: int
    tokens: int
    focal_attended: int
    global_attended: int
    focal_ms: float
    global_ms: float
    focal_peak_bytes: int
    global_peak_bytes: int

    @property
    def ratio(self) -> float:
        return self.global_ms / self.focal_ms


def _median_ms(fn: Callable[[], object], reps: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def _peak_bytes(fn: Callable[[], object]) -> int:
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def degenerate_check(size: int, dim: int = 16, heads: int = 2, seed: int = 0) -> float:
    """Max |focal - global| when the focal geometry covers the whole map."""
    with precision("double"):
        rng = np.random.default_rng(seed)
        cfg = degenerate_config(size, dim, heads)
        mod = FocalAttention(cfg, (size, size), rng)
        x = Tensor(rng.standard_normal((1, size, size, dim)))
        bias = mod.bias_matrix().data  # (heads, N, N): one window covering the map
        with no_grad():
            a = mod(x).data
            b = global_attention(x, mod, bias).data
    return float(np.abs(a - b).max())


def run_benchmark(sizes: Sequence[int] = (14, 28, 56), config: FocalConfig | None = None,
                  reps: int = 20, seed: int = 0) -> list[BenchRow]:
    """Median forward time and peak allocation per map size for both attentions."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    base = config or FocalConfig.default(dim=32, heads=4)
    rows = []
    for size in sizes:
        cfg = base.for_map(size, size)
        rng = np.random.default_rng(seed)
        mod = FocalAttention(cfg, (size, size), rng)
        x = Tensor(rng.standard_normal((1, size, size, cfg.dim)))
        with no_grad():
            focal = lambda: mod(x)  # noqa: E731
            dense = lambda: global_attention(x, mod)  # noqa: E731
            f_ms, g_ms = _median_ms(focal, reps), _median_ms(dense, reps)
            f_mem, g_mem = _peak_bytes(focal), _peak_bytes(dense)
        rows.append(BenchRow(size, size * size, cfg.attended_tokens, size * size, f_ms, g_ms, f_mem, g_mem))
    return rows


def write_bench_csv(path, rows: Sequence[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(BENCH_HEADER)
        for r in rows:
            d = asdict(r)
            wr.writerow([d["size"], d["tokens"], d["focal_attended"], d["global_attended"], f"{r.focal_ms:.4f}",
                         f"{r.global_ms:.4f}", d["focal_peak_bytes"], d["global_peak_bytes"], f"{r.ratio:.4f}"])
