"""Differentiable operations.

Broadcasting is limited to two documented cases: a Python scalar operand,
and a tensor whose shape equals the *trailing* dimensions of the other
operand (bias-style add/mul).  Everything else must match exactly or a
:class:`DimensionError` is raised.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.linalg.blas import get_blas_funcs
from scipy.special import erf

from .core import DimensionError, ParameterError, Tensor, as_tensor, default_dtype, make_result

# python floats stay "weak" under numpy promotion, so float32 inputs stay float32
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _leading_sum(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``g`` onto a trailing-broadcast operand of ``shape``."""
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))) if extra else g


def _broadcast_kind(a: Tensor, b: Tensor, name: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return "b_trailing"
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return "a_trailing"
    raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} are neither equal nor trailing-compatible")


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    kind = _broadcast_kind(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = _leading_sum(g, sa) if kind == "a_trailing" else g
        gb = _leading_sum(g, sb) if kind == "b_trailing" else g
        return ga, gb

    return make_result(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    return add(a, neg(b))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, b)
    kind = _broadcast_kind(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g * bd if a.requires_grad else None
        gb = g * ad if b.requires_grad else None
        if ga is not None and kind == "a_trailing":
            ga = _leading_sum(ga, ad.shape)
        if gb is not None and kind == "b_trailing":
            gb = _leading_sum(gb, bd.shape)
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    """Elementwise ``a / b`` with the same broadcasting rules as :func:`mul`."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / float(b))
    kind = _broadcast_kind(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd if a.requires_grad else None
        gb = -g * out / bd if b.requires_grad else None
        if ga is not None and kind == "a_trailing":
            ga = _leading_sum(ga, ad.shape)
        if gb is not None and kind == "b_trailing":
            gb = _leading_sum(gb, bd.shape)
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return make_result(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_result(np.maximum(a.data, 0), (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    ad = a.data
    slope = float(slope)
    if not 0.0 <= slope <= 1.0:
        raise ParameterError(f"leaky_relu slope must lie in [0, 1], got {slope}")
    pos = ad > 0
    out = np.maximum(ad, ad * slope)

    def backward(g):
        gx = pos.astype(g.dtype)
        gx *= 1.0 - slope
        gx += slope
        gx *= g
        return (gx,)

    return make_result(out, (a,), backward, "leaky_relu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    ad = a.data
    cdf = erf(ad * _INV_SQRT2)
    cdf += 1.0
    cdf *= 0.5

    def backward(g):
        pdf = ad * ad
        pdf *= -0.5
        np.exp(pdf, out=pdf)
        pdf *= ad
        pdf *= _INV_SQRT_2PI
        pdf += cdf
        pdf *= g
        return (pdf,)

    return make_result(ad * cdf, (a,), backward, "gelu")


# -- reductions -----------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape),)

    out = a.data.sum(axis=axes, keepdims=keepdims)
    return make_result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or ``a[..., m, k] @ b[..., k, n]`` (same leading dims)."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if bd.ndim == 2:
            # flatten to one GEMM; numpy loops over leading dims otherwise
            g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    if bd.ndim == 2:
        ad = np.ascontiguousarray(ad)
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
    else:
        out = ad @ bd
    return make_result(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the trailing axis; weight is (in, out)."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# -- structural -----------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}") from exc
    src = a.shape
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    ndim = tensors[0].ndim
    ax = _norm_axes(axis, ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat along {ax}: incompatible shapes {[t.shape for t in tensors]}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def slice_(a: Tensor, index) -> Tensor:
    """Basic (int/slice/Ellipsis) indexing."""
    idx = index if isinstance(index, tuple) else (index,)
    for item in idx:
        if not (isinstance(item, (int, slice, np.integer)) or item is Ellipsis):
            raise DimensionError("only basic slicing is differentiable; use take() for gathers")
    out = a.data[index]
    shape, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make_result(out, (a,), backward, "slice")


def _scatter_matrix(indices: np.ndarray, n: int):
    m = indices.size
    return sparse.csr_matrix((np.ones(m), (indices, np.arange(m))), shape=(n, m))


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with integer ``indices`` (any shape; result splices it in).

    The backward pass scatter-adds, so repeated indices accumulate.
    """
    ax = _norm_axes(axis, a.ndim)[0]
    indices = np.asarray(indices, dtype=np.int64)
    n = a.shape[ax]
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise DimensionError(f"take: index out of range for axis of length {n}")
    out = np.take(a.data, indices, axis=ax)
    shape, dtype = a.shape, a.data.dtype
    flat = indices.reshape(-1)

    def backward(g):
        # bring the gathered axes to the front, collapse to a matrix, scatter via sparse product
        lead = indices.ndim
        g = np.moveaxis(g, tuple(range(ax, ax + lead)), tuple(range(lead)))
        rest = g.shape[lead:]
        g2 = g.reshape(flat.size, -1)
        s = _scatter_matrix(flat, n).astype(dtype)
        acc = np.asarray(s @ g2, dtype=dtype).reshape((n,) + rest)
        return (np.moveaxis(acc, 0, ax),)

    return make_result(out, (a,), backward, "take")


# -- softmax / normalization ------------------------------------------------------

def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax.  ``mask`` (broadcastable, True = valid) forces
    invalid positions to probability exactly 0."""
    ax = _norm_axes(axis, a.ndim)[0]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if np.broadcast_shapes(mask.shape, a.shape) != a.shape:
            raise DimensionError(f"softmax mask {mask.shape} does not broadcast to {a.shape}")
        # additive 0 / -inf bias on the (usually much smaller) mask shape
        y = a.data + np.where(mask, 0.0, -np.inf).astype(a.data.dtype)
    else:
        y = a.data.copy()
    top = y.max(axis=ax, keepdims=True)
    if mask is not None and np.isneginf(top).any():
        raise RuntimeError("softmax: a row has no valid positions (internal invariant violation)")
    y -= top
    np.exp(y, out=y)
    y /= y.sum(axis=ax, keepdims=True)

    def backward(g):
        gy = g * y
        gy -= y * gy.sum(axis=ax, keepdims=True)
        return (gy,)

    return make_result(y, (a,), backward, "softmax")


def layer_norm(x: Tensor, normalized_dim: int, gamma: Tensor | None = None,
               beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing axis (biased variance), then optional affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    if x.shape[-1] != normalized_dim:
        raise DimensionError(f"layer_norm over {normalized_dim} but trailing dim of {x.shape} differs")
    for p in (gamma, beta):
        if p is not None and p.shape != (normalized_dim,):
            raise DimensionError(f"layer_norm affine parameter shape {p.shape} != ({normalized_dim},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data
    parents = tuple(p for p in (x, gamma, beta) if p is not None)

    def backward(g):
        dxhat = g * gd if gd is not None else g
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append(_leading_sum(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_leading_sum(g, beta.shape))
        return tuple(grads)

    return make_result(out.astype(xd.dtype), parents, backward, "layer_norm")


# -- convolutions -------------------------------------------------------------------
# The core kernels are channels-last (N, H, W, C); the channels-first entry points
# transpose around them.  Weights always use the (O, C, k, k) layout.

def _im2col_nhwc(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, :, a, b, :] = xp[:, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride, :]
    return cols.reshape(n * ho * wo, k * k * c)


def _conv2d_shift(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int, ho: int, wo: int) -> Tensor:
    """Stride-1 convolution as k*k GEMMs over a flattened padded buffer.

    In the flat (n*hp*wp, c) layout, tap (a, b) is the contiguous row range shifted
    by a*wp + b, so every GEMM reads a plain 2-d view.  Rows that straddle image
    or padding borders produce junk outputs that are discarded (and get zero
    gradient in the backward pass).
    """
    n, h, w, c = x.shape
    o, _, k, _ = weight.shape
    xd, dtype = x.data, x.data.dtype
    hp, wp = h + 2 * padding, w + 2 * padding
    rows = n * hp * wp
    tail = (k - 1) * (wp + 1)
    xp = np.zeros((rows + tail, c), dtype=dtype)
    xp[:rows].reshape(n, hp, wp, c)[:, padding:padding + h, padding:padding + w] = xd
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # (k, k, c, o)
    offsets = [(a, b, a * wp + b) for a in range(k) for b in range(k)]
    gemm = get_blas_funcs("gemm", dtype=dtype)
    full = np.zeros((rows, o), dtype=dtype)
    for a, b, off in offsets:
        # full += xp_shift @ tap, computed transposed so BLAS accumulates in place
        gemm(1.0, taps[a, b].T, xp[off:off + rows].T, beta=1.0, c=full.T, overwrite_c=1)
    out = full.reshape(n, hp, wp, o)[:, :ho, :wo]
    if bias is not None:
        out = out + bias.data
    else:
        out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gfull = np.zeros((rows, o), dtype=dtype)
        gfull.reshape(n, hp, wp, o)[:, :ho, :wo] = g
        grads = []
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for a, b, off in offsets:
                gemm(1.0, taps[a, b], gfull.T, beta=1.0, c=dxp[off:off + rows].T, overwrite_c=1)
            grads.append(np.ascontiguousarray(
                dxp[:rows].reshape(n, hp, wp, c)[:, padding:padding + h, padding:padding + w]))
        else:
            grads.append(None)
        if weight.requires_grad:
            dw = np.empty((k, k, c, o), dtype=dtype)
            for a, b, off in offsets:
                dw[a, b] = xp[off:off + rows].T @ gfull
            grads.append(dw.transpose(3, 2, 0, 1))
        else:
            grads.append(None)
        if bias is not None:
            grads.append(g.reshape(-1, o).sum(axis=0))
        return tuple(grads)

    return make_result(out, parents, backward, "conv2d")


def conv2d_nhwc(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (N,H,W,C) with weight (O,C,k,k) -> (N,H',W',O)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects x (N,H,W,C) and weight (O,C,k,k); got {x.shape}, {weight.shape}")
    n, h, w, c = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise DimensionError(f"conv2d channel/kernel mismatch: input channels {c}, weight {weight.shape}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"conv2d kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({o},)")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xd, wd = x.data, weight.data
    if stride == 1 and k > 1 and c >= 4:
        return _conv2d_shift(x, weight, bias, padding, ho, wo)
    w2 = wd.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    if k == 1 and stride == 1 and padding == 0:
        cols = xd.reshape(n * h * w, c)
        xp_shape = None
    else:
        xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
        xp_shape = xp.shape
        cols = _im2col_nhwc(xp, k, stride, ho, wo)
        del xp
    out = (cols @ w2).reshape(n, ho, wo, o)
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, o)
        grads = []
        if x.requires_grad:
            dcols = g2 @ w2.T
            if xp_shape is None:
                grads.append(dcols.reshape(xd.shape))
            else:
                dcols = dcols.reshape(n, ho, wo, k, k, c)
                dxp = np.zeros(xp_shape, dtype=xd.dtype)
                for a in range(k):
                    for b in range(k):
                        dxp[:, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, a, b, :]
                grads.append(dxp[:, padding:padding + h, padding:padding + w, :] if padding else dxp)
        else:
            grads.append(None)
        if weight.requires_grad:
            grads.append((cols.T @ g2).reshape(k, k, c, o).transpose(3, 2, 0, 1))
        else:
            grads.append(None)
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_result(out, parents, backward, "conv2d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (C,H,W) or (N,C,H,W) with weight (O,C,k,k)."""
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), weight, bias, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects (C,H,W) or (N,C,H,W), got {x.shape}")
    y = conv2d_nhwc(transpose(x, (0, 2, 3, 1)), weight, bias, stride, padding)
    return transpose(y, (0, 3, 1, 2))


def conv_transpose2d_nhwc(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution with kernel == stride: x (N,H,W,C), weight (C,O,s,s) -> (N,H*s,W*s,O)."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != x.shape[3] or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv_transpose2d: incompatible input {x.shape} and weight {weight.shape}")
    n, h, w, c = x.shape
    _, o, s, _ = weight.shape
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv_transpose2d bias shape {bias.shape} != ({o},)")
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, c)
    w2 = wd.transpose(0, 2, 3, 1).reshape(c, s * s * o)
    y = (x2 @ w2).reshape(n, h, w, s, s, o).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * s, w * s, o)
    if bias is not None:
        y += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(n, h, s, w, s, o).transpose(0, 1, 3, 2, 4, 5).reshape(-1, s * s * o)
        grads = [
            (g2 @ w2.T).reshape(n, h, w, c) if x.requires_grad else None,
            (x2.T @ g2).reshape(c, s, s, o).transpose(0, 3, 1, 2) if weight.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g.reshape(-1, o).sum(axis=0))
        return tuple(grads)

    return make_result(y, parents, backward, "conv_transpose2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Channels-first transposed convolution, kernel == stride: (N,C,H,W) -> (N,O,H*s,W*s)."""
    if x.ndim != 4:
        raise DimensionError(f"conv_transpose2d expects (N,C,H,W), got {x.shape}")
    y = conv_transpose2d_nhwc(transpose(x, (0, 2, 3, 1)), weight, bias)
    return transpose(y, (0, 3, 1, 2))


def instance_norm_nhwc(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes of (N, H, W, C); no affine."""
    if eps <= 0:
        raise ParameterError(f"instance_norm eps must be > 0, got {eps}")
    if x.ndim != 4:
        raise DimensionError(f"instance_norm expects a 4-d tensor, got {x.shape}")
    xd = x.data
    m = xd.shape[1] * xd.shape[2]
    mu = xd.mean(axis=(1, 2), keepdims=True)
    xhat = xd - mu
    var = np.einsum("nhwc,nhwc->nc", xhat, xhat)[:, None, None, :] / m
    rstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat *= rstd

    def backward(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gx = np.einsum("nhwc,nhwc->nc", g, xhat)[:, None, None, :] / m
        out = xhat * gx.astype(g.dtype)
        out -= g
        out += gm
        out *= -rstd
        return (out,)

    return make_result(xhat, (x,), backward, "instance_norm")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Channels-first (N, C, H, W) instance normalization without affine."""
    if x.ndim != 4:
        raise DimensionError(f"instance_norm expects (N, C, H, W), got {x.shape}")
    return transpose(instance_norm_nhwc(transpose(x, (0, 2, 3, 1)), eps), (0, 3, 1, 2))


# -- windows ----------------------------------------------------------------------

def window_partition(x: Tensor, window: int) -> Tensor:
    """(d, H, W) -> (nW, d, s, s), windows in row-major grid order.

    Also accepts a leading batch axis: (N, d, H, W) -> (N, nW, d, s, s).
    """
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise DimensionError(f"window_partition expects (d,H,W) or (N,d,H,W), got {x.shape}")
    d, h, w = x.shape[-3:]
    if window < 1 or h % window or w % window:
        raise DimensionError(f"map {h}x{w} is not divisible by window {window}; pad upstream")
    n = x.shape[0] if batched else 1
    gh, gw = h // window, w // window
    t = reshape(x, (n, d, gh, window, gw, window))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    t = reshape(t, (n, gh * gw, d, window, window))
    return t if batched else reshape(t, t.shape[1:])


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    batched = windows.ndim == 5
    if windows.ndim not in (4, 5):
        raise DimensionError(f"window_reverse expects (nW,d,s,s) or (N,nW,d,s,s), got {windows.shape}")
    if h % window or w % window:
        raise DimensionError(f"map {h}x{w} is not divisible by window {window}")
    gh, gw = h // window, w // window
    nw, d = windows.shape[-4], windows.shape[-3]
    if nw != gh * gw or windows.shape[-2:] != (window, window):
        raise DimensionError(f"{windows.shape} does not tile a {h}x{w} map with window {window}")
    n = windows.shape[0] if batched else 1
    t = reshape(windows, (n, gh, gw, d, window, window))
    t = transpose(t, (0, 3, 1, 4, 2, 5))
    t = reshape(t, (n, d, h, w))
    return t if batched else reshape(t, t.shape[1:])


def tokens_partition(x: Tensor, window: int) -> Tensor:
    """Channels-last variant: (N, H, W, d) -> (N, nW, s*s, d)."""
    n, h, w, d = x.shape
    if h % window or w % window:
        raise DimensionError(f"map {h}x{w} is not divisible by window {window}; pad upstream")
    gh, gw = h // window, w // window
    t = reshape(x, (n, gh, window, gw, window, d))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (n, gh * gw, window * window, d))


def tokens_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`tokens_partition`."""
    n, _, _, d = windows.shape
    gh, gw = h // window, w // window
    t = reshape(windows, (n, gh, gw, window, window, d))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (n, h, w, d))


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)
