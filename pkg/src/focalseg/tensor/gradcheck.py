"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .core import Tensor, get_precision


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    worst_input: int
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    tolerance: float
    checked: int
    seeds: int = 1
    worst_seed: int | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def describe(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
                f"(input {self.worst_input}, index {self.worst_index}: "
                f"analytic {self.analytic:.6e}, numeric {self.numeric:.6e}; {self.checked} elements)")


def _scalarize(out: Tensor, probe: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return ops.reshape(out, ())
    return ops.sum(ops.mul(out, Tensor(probe)))


def gradient_check(op: Callable[..., Tensor], inputs: Sequence[Tensor], tolerance: float = 1e-4,
                   h: float = 1e-5, name: str | None = None, seed: int = 0,
                   max_elements: int | None = None) -> GradCheckReport:
    """Compare backward() against central differences for every input element.

    Non-scalar outputs are reduced with a fixed random probe vector so that
    every output element influences the checked scalar.  The error measure is
    ``|analytic - numeric| / max(1, |numeric|)``.  ``max_elements`` caps the
    number of (randomly chosen) elements per input for large parameter sets.
    """
    if get_precision() != "double":
        raise RuntimeError("gradient_check requires double precision (set_precision('double'))")
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise ValueError("gradient_check inputs must be finite")
        t.grad = None
    rng = np.random.default_rng(seed)
    out = op(*inputs)
    probe = None if out.size == 1 else rng.standard_normal(out.shape)
    _scalarize(out, probe).backward()

    def f() -> float:
        return float(_scalarize(op(*inputs), probe).data)

    worst = (0.0, 0, (), 0.0, 0.0)
    checked = 0
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat_idx = np.arange(t.size)
        if max_elements is not None and t.size > max_elements:
            flat_idx = rng.choice(t.size, size=max_elements, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), t.shape)
            orig = t.data[idx]
            t.data[idx] = orig + h
            fp = f()
            t.data[idx] = orig - h
            fm = f()
            t.data[idx] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(1.0, abs(numeric))
            checked += 1
            if err > worst[0] or checked == 1:
                worst = (err, k, tuple(int(i) for i in idx), a, numeric)
    err, k, idx, a, numeric = worst
    return GradCheckReport(name or getattr(op, "__name__", "op"), err, k, idx, a, numeric, tolerance, checked)
