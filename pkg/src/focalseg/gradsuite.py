"""Finite-difference gradient suite: every differentiable op plus a composed toy model."""

from __future__ import annotations

import csv
import dataclasses
from typing import Callable, Iterable, Sequence

import numpy as np

from . import attention, losses
from .model import FocalUNETR, preset
from .tensor import GradCheckReport, Tensor, gradient_check, ops, precision

REPORT_HEADER = ("name", "seeds", "max_rel_error", "tolerance", "passed", "worst_seed", "worst_input",
                 "worst_index", "analytic", "numeric", "checked")

# (name, builder) where builder(rng) -> (fn, inputs)
Case = tuple[str, Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]]


def _t(rng, *shape, lo=None, hi=None) -> Tensor:
    if lo is None:
        return Tensor(rng.standard_normal(shape), requires_grad=True)
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _away_from(rng, shape, points, gap=0.05) -> Tensor:
    """Normal samples nudged at least ``gap`` away from the kinks in ``points``."""
    x = rng.standard_normal(shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.sign(x[near] - p + 1e-12) * gap * 2
    return Tensor(x, requires_grad=True)


def _elementwise_cases() -> list[Case]:
    return [
        ("add", lambda r: (ops.add, [_t(r, 3, 4), _t(r, 3, 4)])),
        ("add_broadcast", lambda r: (ops.add, [_t(r, 2, 3, 4), _t(r, 4)])),
        ("sub", lambda r: (ops.sub, [_t(r, 3, 4), _t(r, 3, 4)])),
        ("neg", lambda r: (ops.neg, [_t(r, 5)])),
        ("scale", lambda r: (lambda a: ops.scale(a, -1.7), [_t(r, 3, 4)])),
        ("mul", lambda r: (ops.mul, [_t(r, 3, 4), _t(r, 3, 4)])),
        ("mul_broadcast", lambda r: (ops.mul, [_t(r, 2, 3, 4), _t(r, 3, 4)])),
        ("div", lambda r: (ops.div, [_t(r, 3, 4), _t(r, 3, 4, lo=0.5, hi=2.0)])),
        ("div_broadcast", lambda r: (ops.div, [_t(r, 2, 3, 4), _t(r, 4, lo=0.5, hi=2.0)])),
        ("exp", lambda r: (ops.exp, [_t(r, 3, 4)])),
        ("log", lambda r: (ops.log, [_t(r, 3, 4, lo=0.2, hi=3.0)])),
        ("square", lambda r: (ops.square, [_t(r, 3, 4)])),
        ("sqrt", lambda r: (ops.sqrt, [_t(r, 3, 4, lo=0.2, hi=3.0)])),
        ("clip", lambda r: (lambda a: ops.clip(a, -0.5, 0.5), [_away_from(r, (4, 5), (-0.5, 0.5))])),
        ("relu", lambda r: (ops.relu, [_away_from(r, (4, 5), (0.0,))])),
        ("leaky_relu", lambda r: (lambda a: ops.leaky_relu(a, 0.01), [_away_from(r, (4, 5), (0.0,))])),
        ("gelu", lambda r: (ops.gelu, [_t(r, 4, 5)])),
    ]


def _structural_cases() -> list[Case]:
    def take_case(r):
        idx = r.integers(0, 5, size=(3, 4))  # repeats exercise the scatter-add
        return (lambda a: ops.take(a, idx, axis=1), [_t(r, 2, 5, 3)])

    return [
        ("sum", lambda r: (lambda a: ops.sum(a, axis=(0, 2)), [_t(r, 2, 3, 4)])),
        ("sum_all", lambda r: (ops.sum, [_t(r, 2, 3)])),
        ("mean", lambda r: (lambda a: ops.mean(a, axis=1, keepdims=True), [_t(r, 2, 3, 4)])),
        ("matmul", lambda r: (ops.matmul, [_t(r, 3, 4), _t(r, 4, 5)])),
        ("matmul_batched", lambda r: (ops.matmul, [_t(r, 2, 3, 4), _t(r, 2, 4, 5)])),
        ("matmul_shared_rhs", lambda r: (ops.matmul, [_t(r, 2, 3, 3, 4), _t(r, 4, 5)])),
        ("linear", lambda r: (ops.linear, [_t(r, 2, 3, 4), _t(r, 4, 5), _t(r, 5)])),
        ("reshape", lambda r: (lambda a: ops.reshape(a, (4, 6)), [_t(r, 2, 3, 4)])),
        ("transpose", lambda r: (lambda a: ops.transpose(a, (2, 0, 1)), [_t(r, 2, 3, 4)])),
        ("concat", lambda r: (lambda a, b: ops.concat([a, b], axis=1), [_t(r, 2, 3), _t(r, 2, 4)])),
        ("slice", lambda r: (lambda a: ops.slice_(a, (slice(None), slice(1, 3))), [_t(r, 2, 4, 3)])),
        ("take", take_case),
        ("window_partition", lambda r: (lambda a: ops.window_partition(a, 2), [_t(r, 3, 4, 6)])),
        ("window_reverse", lambda r: (lambda a: ops.window_reverse(a, 2, 4, 6), [_t(r, 6, 3, 2, 2)])),
        ("tokens_partition", lambda r: (lambda a: ops.tokens_partition(a, 2), [_t(r, 1, 4, 4, 3)])),
        ("tokens_reverse", lambda r: (lambda a: ops.tokens_reverse(a, 2, 4, 4), [_t(r, 1, 4, 4, 3)])),
    ]


def _softmax_masked(r):
    mask = r.random((3, 6)) < 0.6
    mask[:, 0] = True
    return (lambda a: ops.softmax(a, axis=-1, mask=mask), [_t(r, 2, 3, 6)])


def _network_cases() -> list[Case]:
    return [
        ("softmax", lambda r: (lambda a: ops.softmax(a, axis=1), [_t(r, 2, 4, 3)])),
        ("softmax_masked", _softmax_masked),
        ("layer_norm", lambda r: (lambda x, g, b: ops.layer_norm(x, 5, g, b), [_t(r, 2, 3, 5), _t(r, 5), _t(r, 5)])),
        ("conv2d_im2col", lambda r: (lambda x, w, b: ops.conv2d_nhwc(x, w, b, 1, 1),
                                     [_t(r, 2, 5, 4, 2), _t(r, 3, 2, 3, 3), _t(r, 3)])),
        ("conv2d_shift", lambda r: (lambda x, w, b: ops.conv2d_nhwc(x, w, b, 1, 1),
                                    [_t(r, 2, 5, 4, 4), _t(r, 3, 4, 3, 3), _t(r, 3)])),
        ("conv2d_stride2", lambda r: (lambda x, w: ops.conv2d_nhwc(x, w, None, 2, 1),
                                      [_t(r, 1, 6, 6, 3), _t(r, 2, 3, 3, 3)])),
        ("conv2d_1x1", lambda r: (lambda x, w: ops.conv2d_nhwc(x, w), [_t(r, 1, 3, 3, 4), _t(r, 2, 4, 1, 1)])),
        ("conv2d_nchw", lambda r: (lambda x, w: ops.conv2d(x, w, None, 1, 1), [_t(r, 1, 2, 4, 4), _t(r, 2, 2, 3, 3)])),
        ("conv_transpose2d", lambda r: (ops.conv_transpose2d_nhwc, [_t(r, 1, 3, 2, 4), _t(r, 4, 2, 2, 2), _t(r, 2)])),
        ("conv_transpose2d_nchw", lambda r: (ops.conv_transpose2d, [_t(r, 1, 3, 2, 2), _t(r, 3, 2, 2, 2)])),
        ("instance_norm", lambda r: (ops.instance_norm_nhwc, [_t(r, 2, 3, 4, 2)])),
        ("instance_norm_nchw", lambda r: (ops.instance_norm, [_t(r, 2, 2, 3, 4)])),
    ]


def _focal_module_case(r):
    cfg = attention.FocalConfig(levels=2, window=2, sub_windows=(1, 2), regions=(2, 3), heads=2, dim=4)
    mod = attention.FocalAttention(cfg, (4, 4), r)
    for p in mod.parameters():
        p.data += 0.1 * r.standard_normal(p.shape)  # move pooling weights off their uniform init
    x = _t(r, 1, 4, 4, 4)
    return (lambda x_, *_: mod(x_), [x] + mod.parameters())


def _sub_window_pool_case(r):
    return (lambda x, w, b: attention.sub_window_pool(x, 2, w, b), [_t(r, 3, 4, 4), _t(r, 4, 1), _t(r, 1)])


def _module_and_loss_cases() -> list[Case]:
    def probs_target(r):
        probs = ops.softmax(_t(r, 2, 3, 4, 4), axis=1).data
        labels = r.integers(0, 3, size=(2, 4, 4))
        return Tensor(probs, requires_grad=True), losses.one_hot(labels, 3)

    def dice(r):
        p, g = probs_target(r)
        return (lambda a: losses.dice_loss(a, g), [p])

    def ce(r):
        p, g = probs_target(r)
        return (lambda a: losses.ce_loss(a, g), [p])

    def reg(form):
        def build(r):
            target = r.random((2, 1, 4, 4))
            return (lambda a: losses.reg_loss(a, target, form), [_t(r, 2, 1, 4, 4)])
        return build

    return [
        ("sub_window_pool", _sub_window_pool_case),
        ("focal_attention", _focal_module_case),
        ("dice_loss", dice),
        ("ce_loss", ce),
        ("reg_loss_mse", reg("mse")),
        ("reg_loss_norm", reg("norm")),
    ]


def _toy_model_case(r):
    """Composed toy model (32x32 input): Dice + CE + heatmap MSE, checked w.r.t. input and all weights."""
    model = FocalUNETR(preset("toy"), seed=int(r.integers(1 << 31)))
    head = model.boundary_head.out.weight
    head.data[...] = r.standard_normal(head.shape) * 0.5  # nonzero so the heatmap path reaches the decoder
    x = _t(r, 1, 1, 32, 32)
    labels = (r.random((1, 32, 32)) < 0.3).astype(np.int64)
    target = losses.one_hot(labels, 2)
    heat = r.random((1, 1, 32, 32))

    def fn(x_, *_):
        out = model(x_)
        return losses.total_loss(losses.seg_loss(out.seg_probs, target), losses.reg_loss(out.boundary_heatmap, heat))

    return fn, [x] + model.parameters()


def suite_cases() -> list[Case]:
    return (_elementwise_cases() + _structural_cases() + _network_cases() + _module_and_loss_cases()
            + [("toy_focalunetr", _toy_model_case)])


def run_case(name: str, build, seeds: Iterable[int], tolerance: float = 1e-4,
             max_elements: int | None = None, h: float = 1e-5) -> tuple[GradCheckReport, int, int]:
    """Worst report over ``seeds``; returns (report, worst seed, number of seeds)."""
    worst, worst_seed, n = None, -1, 0
    with precision("double"):
        for seed in seeds:
            rng = np.random.default_rng([seed, _stable_hash(name)])
            fn, inputs = build(rng)
            rep = gradient_check(fn, inputs, tolerance=tolerance, h=h, name=name, seed=seed,
                                 max_elements=max_elements)
            n += 1
            if worst is None or rep.max_rel_error > worst.max_rel_error:
                worst, worst_seed = rep, seed
    return worst, worst_seed, n


def _stable_hash(name: str) -> int:
    return sum((i + 1) * ord(c) for i, c in enumerate(name))


def run_suite(seeds: Sequence[int] = range(10), tolerance: float = 1e-4, model_elements: int = 3,
              model_step: float = 1e-7, cases: Sequence[Case] | None = None) -> list[GradCheckReport]:
    """Check every case over ``seeds``; returns one worst-case report per case.

    The toy model has ~1e5 weights, so ``model_elements`` randomly chosen
    entries of each parameter tensor (and of the input) are probed per seed.
    Its many leaky-ReLU units make a wide difference step straddle kinks, hence
    the smaller ``model_step``.
    """
    seeds = list(seeds)
    out = []
    for name, build in (cases if cases is not None else suite_cases()):
        composed = name == "toy_focalunetr"
        rep, worst_seed, n = run_case(name, build, seeds, tolerance, model_elements if composed else None,
                                      model_step if composed else 1e-5)
        out.append(dataclasses.replace(rep, seeds=n, worst_seed=worst_seed))
    return out


def write_report(path, reports: Sequence[GradCheckReport]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(REPORT_HEADER)
        for r in reports:
            wr.writerow([r.name, r.seeds, f"{r.max_rel_error:.6e}", f"{r.tolerance:.1e}",
                         int(r.passed), "" if r.worst_seed is None else r.worst_seed, r.worst_input,
                         "x".join(map(str, r.worst_index)), f"{r.analytic:.10e}", f"{r.numeric:.10e}", r.checked])
