"""Training objectives: Dice + cross-entropy segmentation loss and boundary regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, ParameterError, Tensor, as_tensor, ops

DICE_EPS = 1e-5
CE_CLIP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ParameterError(f"loss weights must be >= 0, got ({self.lambda1}, {self.lambda2})")


def one_hot(labels, num_classes: int) -> np.ndarray:
    """(N, H, W) integer labels -> (N, K, H, W) float one-hot."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    out = np.eye(num_classes)[labels]
    return np.moveaxis(out, -1, 1)


def _check(probs: Tensor, target: np.ndarray, name: str) -> np.ndarray:
    target = np.asarray(target)
    if probs.shape != target.shape:
        raise DimensionError(f"{name}: probs {probs.shape} and target {target.shape} differ")
    if probs.ndim < 2:
        raise DimensionError(f"{name}: expected (N, K, ...) class maps, got {probs.shape}")
    return target.astype(probs.data.dtype)


def dice_loss(probs: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice over the whole batch, averaged over foreground classes (1..K-1).

    ``probs`` and the one-hot ``target`` are (N, K, H, W); a single-class input
    is treated as a foreground-only map.
    """
    g = _check(probs, target, "dice_loss")
    k = probs.shape[1]
    classes = range(1, k) if k > 1 else range(1)
    axes = (0,) + tuple(range(2, probs.ndim))
    inter = ops.sum(ops.mul(probs, Tensor(g)), axis=axes)  # (K,)
    p_sum = ops.sum(probs, axis=axes)
    g_sum = Tensor(g.sum(axis=axes))
    num = ops.add(ops.scale(inter, 2.0), eps)
    den = ops.add(ops.add(p_sum, g_sum), eps)
    ratio = ops.div(num, den)
    fg = ops.slice_(ratio, slice(classes.start, classes.stop))
    return ops.add(ops.neg(ops.mean(fg)), 1.0)


def ce_loss(probs: Tensor, target, clip: float = CE_CLIP) -> Tensor:
    """Mean over pixels of -log p(true class), probabilities clipped to [clip, 1 - clip]."""
    g = _check(probs, target, "ce_loss")
    logp = ops.log(ops.clip(probs, clip, 1.0 - clip))
    picked = ops.sum(ops.mul(logp, Tensor(g)), axis=1)  # (N, H, W)
    return ops.neg(ops.mean(picked))


def seg_loss(probs: Tensor, target) -> Tensor:
    return ops.add(dice_loss(probs, target), ce_loss(probs, target))


def reg_loss(pred: Tensor, target, form: str = "mse") -> Tensor:
    """Boundary heatmap regression, averaged over the batch.

    ``form="mse"`` is the per-image mean squared error; ``form="norm"`` is the
    per-image Euclidean norm of the residual.
    """
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"reg_loss: prediction {pred.shape} and target {target.shape} differ")
    diff = ops.sub(pred, Tensor(target.astype(pred.data.dtype)))
    if form == "mse":
        return ops.mean(ops.square(diff))
    if form == "norm":
        per_image = ops.sum(ops.square(ops.reshape(diff, (diff.shape[0], -1) if diff.ndim > 1 else (1, -1))), axis=1)
        return ops.mean(ops.sqrt(per_image))
    raise ParameterError(f"unknown reg_loss form {form!r}")


def total_loss(l_seg, l_reg, weights: LossWeights = LossWeights()):
    """lambda1 * L_seg + lambda2 * L_reg.  Tensors stay differentiable; ``l_reg=None`` drops the term."""
    if not isinstance(l_seg, Tensor) and not isinstance(l_reg, Tensor):
        return weights.lambda1 * float(l_seg) + (weights.lambda2 * float(l_reg) if l_reg is not None else 0.0)
    out = ops.scale(as_tensor(l_seg), weights.lambda1)
    if l_reg is None:
        return out
    return ops.add(out, ops.scale(as_tensor(l_reg), weights.lambda2))
