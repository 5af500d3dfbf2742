"""Window-wise focal self-attention.

Each query window attends to

* level 1: raw tokens (sub-window size 1) in an ``s_r^1 x s_r^1`` region, and
* levels l >= 2: tokens pooled over ``s_w^l x s_w^l`` sub-windows, in an
  ``s_r^l x s_r^l`` region of the pooled grid,

all regions centred on the query window.  Out-of-map region cells are masked
out of the softmax.  A learnable relative-position bias table per level is
indexed by the offset (in level-1 token units) from the query token to the
top-left corner of the key's sub-window; because the region anchor moves in
lock-step with the window, the bias matrix is the same for every window.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .nn import Linear, Module, param, trunc_normal
from .tensor import DimensionError, Tensor, ops


def _nearest_divisor(n: int, target: int) -> int:
    divs = [k for k in range(1, n + 1) if n % k == 0]
    return min(divs, key=lambda k: (abs(k - target), -k))


@dataclass(frozen=True)
class FocalConfig:
    """Focal-attention hyperparameters.

    ``window`` is the query window side s_w; ``sub_windows[l]`` the pooling
    sub-window side s_w^l and ``regions[l]`` the focal region side s_r^l
    (in sub-windows) of level l.
    """

    levels: int = 2
    window: int = 7
    sub_windows: tuple[int, ...] = (1, 7)
    regions: tuple[int, ...] = (7, 3)
    heads: int = 4
    dim: int = 32

    @classmethod
    def default(cls, dim: int, heads: int = 4, window: int = 7) -> "FocalConfig":
        return cls(levels=2, window=window, sub_windows=(1, window), regions=(window, 3), heads=heads, dim=dim)

    def validate(self, map_hw: tuple[int, int] | None = None) -> None:
        if self.levels < 1:
            raise ValueError(f"need at least one focal level, got {self.levels}")
        if len(self.sub_windows) != self.levels or len(self.regions) != self.levels:
            raise ValueError(f"sub_windows {self.sub_windows} / regions {self.regions} must have {self.levels} entries")
        if min(self.sub_windows + self.regions + (self.window, self.heads, self.dim)) < 1:
            raise ValueError("all focal sizes must be >= 1")
        if self.sub_windows[0] != 1:
            raise ValueError("level-1 sub-window must be 1 (fine-grain keys are raw tokens)")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        for sub in self.sub_windows:
            if self.window % sub:
                raise ValueError(f"sub-window {sub} does not divide window {self.window}")
        if map_hw is not None:
            h, w = map_hw
            if h % self.window or w % self.window:
                raise DimensionError(f"map {h}x{w} not divisible by window {self.window}; pad upstream")

    @property
    def attended_tokens(self) -> int:
        return attended_token_count(self)

    def for_map(self, h: int, w: int) -> "FocalConfig":
        """Adapt the geometry to an ``h x w`` map.

        The window snaps to the nearest divisor of the map, pooled sub-windows
        to the nearest divisor of the window, a level-1 region equal to the
        window follows it, and pooled regions are capped at ``2g - 1`` for a
        ``g``-cell pooled grid so every cell is realizable.  Valid configs
        pass through unchanged.
        """
        g = math.gcd(h, w)
        window = self.window if (h % self.window == 0 and w % self.window == 0) else _nearest_divisor(g, self.window)
        subs = [1] + [s if window % s == 0 else _nearest_divisor(window, s) for s in self.sub_windows[1:]]
        regions = []
        for lvl, r in enumerate(self.regions):
            if lvl == 0 and r == self.window:
                r = window
            grid = min(h, w) // subs[lvl]
            regions.append(min(r, 2 * grid - 1))
        return replace(self, window=window, sub_windows=tuple(subs), regions=tuple(regions))


def attended_token_count(config: FocalConfig) -> int:
    """Keys/values each query sees: sum over levels of s_r^l squared."""
    return int(sum(r * r for r in config.regions))


# -- geometry ---------------------------------------------------------------------

def _region_start(window_idx: np.ndarray, window: int, sub: int, region: int) -> np.ndarray:
    # region of `region` cells centred on the window centre in level coordinates; ties go top-left
    return np.floor_divide(2 * window_idx * window + window - region * sub, 2 * sub)


def neighborhood_indices(map_h: int, map_w: int, window: int, sub: int, region: int):
    """Flat level-grid indices (clamped) and validity mask, both (nW, region**2)."""
    gh, gw = map_h // window, map_w // window
    lh, lw = map_h // sub, map_w // sub
    rs = _region_start(np.arange(gh), window, sub, region)[:, None] + np.arange(region)  # (gh, r)
    cs = _region_start(np.arange(gw), window, sub, region)[:, None] + np.arange(region)  # (gw, r)
    rows = np.broadcast_to(rs[:, None, :, None], (gh, gw, region, region))
    cols = np.broadcast_to(cs[None, :, None, :], (gh, gw, region, region))
    valid = (rows >= 0) & (rows < lh) & (cols >= 0) & (cols < lw)
    flat = np.clip(rows, 0, lh - 1) * lw + np.clip(cols, 0, lw - 1)
    return flat.reshape(gh * gw, region * region), valid.reshape(gh * gw, region * region)


def relative_offsets(window: int, sub: int, region: int):
    """Per (query, key) pair the offset from query token to key sub-window corner.

    Returns (index (window**2, region**2) into a table of n_offsets entries,
    n_offsets, the (n_offsets, 2) offset list).
    """
    rel = int(_region_start(np.array(0), window, sub, region)) * sub
    q = np.arange(window)
    k = np.arange(region)
    d = rel + k[None, :] * sub - q[:, None]  # (window, region): offset along one axis
    values, inverse = np.unique(d, return_inverse=True)
    inverse = inverse.reshape(window, region)
    nv = len(values)
    idx = inverse[:, None, :, None] * nv + inverse[None, :, None, :]  # (qr, qc, kr, kc)
    offsets = np.stack(np.meshgrid(values, values, indexing="ij"), -1).reshape(-1, 2)
    return idx.reshape(window * window, region * region), nv * nv, offsets


# -- functional pieces ---------------------------------------------------------------

def _pool_tokens(x: Tensor, sub: int, weight: Tensor | None, bias: Tensor | None) -> Tensor:
    """(N, H, W, d) -> (N, H/sub, W/sub, d) by a learned linear map over each sub-window."""
    n, h, w, d = x.shape
    if h % sub or w % sub:
        raise DimensionError(f"map {h}x{w} not divisible by sub-window {sub}")
    if sub == 1:
        return x
    t = ops.reshape(x, (n, h // sub, sub, w // sub, sub, d))
    t = ops.transpose(t, (0, 1, 3, 5, 2, 4))
    t = ops.reshape(t, (n, h // sub, w // sub, d, sub * sub))
    t = ops.matmul(t, weight)  # (..., d, 1)
    t = ops.add(t, bias)
    return ops.reshape(t, (n, h // sub, w // sub, d))


def sub_window_pool(x: Tensor, sub: int, weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Pool a (d, H, W) map over ``sub x sub`` sub-windows -> (d, H/sub, W/sub).

    ``weight`` has shape (sub*sub, 1) and is shared across channels; ``bias`` (1,).
    """
    if x.ndim != 3:
        raise DimensionError(f"sub_window_pool expects (d, H, W), got {x.shape}")
    d, h, w = x.shape
    if h % sub or w % sub:
        raise DimensionError(f"map {h}x{w} not divisible by sub-window {sub}")
    if sub > 1 and (weight is None or weight.shape != (sub * sub, 1)):
        raise DimensionError(f"pool weight must be ({sub * sub}, 1)")
    t = ops.reshape(ops.transpose(x, (1, 2, 0)), (1, h, w, d))
    t = _pool_tokens(t, sub, weight, bias if bias is not None else Tensor(np.zeros(1)))
    return ops.transpose(ops.reshape(t, t.shape[1:]), (2, 0, 1))


def project_qkv(maps: Sequence[Tensor], f_q: Linear, f_k: Linear, f_v: Linear):
    """Q from the level-1 map, K^l and V^l from every level with shared weights.

    ``maps`` are channels-first (d, h_l, w_l).
    """
    d = maps[0].shape[0]
    for m in maps:
        if m.ndim != 3 or m.shape[0] != d:
            raise DimensionError(f"all pooled maps must share channel dim {d}; got {[m.shape for m in maps]}")

    def apply(f, m):
        return ops.transpose(f(ops.transpose(m, (1, 2, 0))), (2, 0, 1))

    q = apply(f_q, maps[0])
    return q, [apply(f_k, m) for m in maps], [apply(f_v, m) for m in maps]


def gather_neighborhood(kv: Tensor, window_index: int, region: int, window: int, sub: int):
    """Tokens of a (d, h_l, w_l) level map in the focal region of one window.

    Returns ``(tokens (region**2, d), valid (region**2,) bool)``; out-of-map
    rows are zero and flagged invalid.
    """
    d, lh, lw = kv.shape
    map_h, map_w = lh * sub, lw * sub
    if map_h % window or map_w % window:
        raise DimensionError(f"level map {lh}x{lw} (sub {sub}) does not tile with window {window}")
    n_windows = (map_h // window) * (map_w // window)
    if not 0 <= window_index < n_windows:
        raise IndexError(f"window index {window_index} outside grid of {n_windows} windows")
    flat, valid = neighborhood_indices(map_h, map_w, window, sub, region)
    tokens = ops.take(ops.reshape(ops.transpose(kv, (1, 2, 0)), (lh * lw, d)), flat[window_index], axis=0)
    return ops.mul(tokens, Tensor(valid[window_index][:, None].astype(tokens.data.dtype) * np.ones((1, d)))), valid[window_index]


def add_relative_bias(logits: Tensor, tables: Sequence[Tensor], bias_index: Sequence[np.ndarray]) -> Tensor:
    """logits (..., heads, window**2, s) + B, with B built from per-level tables."""
    return ops.add(logits, relative_bias_matrix(tables, bias_index))


def relative_bias_matrix(tables: Sequence[Tensor], bias_index: Sequence[np.ndarray]) -> Tensor:
    parts = [ops.take(t, idx, axis=1) for t, idx in zip(tables, bias_index)]
    return parts[0] if len(parts) == 1 else ops.concat(parts, axis=-1)


# -- module -------------------------------------------------------------------------

@dataclass
class _LevelGeometry:
    sub: int
    region: int
    gather: np.ndarray
    valid: np.ndarray
    bias_index: np.ndarray
    n_offsets: int
    offsets: np.ndarray = field(repr=False)


class FocalAttention(Module):
    """Focal self-attention over a fixed (H, W) token map, channels-last."""

    def __init__(self, config: FocalConfig, map_hw: tuple[int, int], rng: np.random.Generator):
        config.validate(map_hw)
        self.config = config
        self.map_hw = tuple(map_hw)
        d = config.dim
        self.geometry: list[_LevelGeometry] = []
        for sub, region in zip(config.sub_windows, config.regions):
            gather, valid = neighborhood_indices(*map_hw, config.window, sub, region)
            bidx, n_off, offsets = relative_offsets(config.window, sub, region)
            self.geometry.append(_LevelGeometry(sub, region, gather, valid, bidx, n_off, offsets))
        self.mask = np.concatenate([g.valid for g in self.geometry], axis=1)  # (nW, s)
        self.pool_weights = [param(np.full((g.sub * g.sub, 1), 1.0 / (g.sub * g.sub)))
                             for g in self.geometry if g.sub > 1]
        self.pool_biases = [param(np.zeros(1)) for g in self.geometry if g.sub > 1]
        self.q = Linear(d, d, rng)
        self.kv = Linear(d, 2 * d, rng)
        self.proj = Linear(d, d, rng)
        self.bias_tables = [param(trunc_normal(rng, (config.heads, g.n_offsets))) for g in self.geometry]
        self.record_attention = False
        self.last_attention: np.ndarray | None = None

    def bias_matrix(self) -> Tensor:
        return relative_bias_matrix(self.bias_tables, [g.bias_index for g in self.geometry])

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, d = x.shape
        if (h, w) != self.map_hw or d != self.config.dim:
            raise DimensionError(f"FocalAttention built for {self.map_hw}x{self.config.dim}, got {x.shape}")
        cfg = self.config
        heads, dh, win = cfg.heads, d // cfg.heads, cfg.window
        n_windows = (h // win) * (w // win)

        q = ops.tokens_partition(self.q(x), win)  # (n, nW, win², d)
        q = ops.transpose(ops.reshape(q, (n, n_windows, win * win, heads, dh)), (0, 1, 3, 2, 4))
        q = ops.scale(q, 1.0 / math.sqrt(dh))

        gathered = []
        pool_i = 0
        for geo in self.geometry:
            if geo.sub > 1:
                xl = _pool_tokens(x, geo.sub, self.pool_weights[pool_i], self.pool_biases[pool_i])
                pool_i += 1
            else:
                xl = x
            kv = self.kv(xl)
            lh, lw = kv.shape[1:3]
            kv = ops.take(ops.reshape(kv, (n, lh * lw, 2 * d)), geo.gather, axis=1)  # (n, nW, r², 2d)
            gathered.append(kv)
        kv = gathered[0] if len(gathered) == 1 else ops.concat(gathered, axis=2)
        s = kv.shape[2]
        kv = ops.reshape(kv, (n, n_windows, s, 2, heads, dh))
        k_t = ops.transpose(kv[:, :, :, 0], (0, 1, 3, 4, 2))  # (n, nW, heads, dh, s)
        v = ops.transpose(kv[:, :, :, 1], (0, 1, 3, 2, 4))  # (n, nW, heads, s, dh)

        logits = add_relative_bias(ops.matmul(q, k_t), self.bias_tables, [g.bias_index for g in self.geometry])
        attn = ops.softmax(logits, axis=-1, mask=self.mask[None, :, None, None, :])
        if self.record_attention:
            self.last_attention = attn.data.copy()
        out = ops.matmul(attn, v)  # (n, nW, heads, win², dh)
        out = ops.reshape(ops.transpose(out, (0, 1, 3, 2, 4)), (n, n_windows, win * win, d))
        return self.proj(ops.tokens_reverse(out, win, h, w))

    def write_attention_csv(self, path) -> None:
        """Dump the last recorded attention (first batch item) as CSV rows."""
        if self.last_attention is None:
            raise RuntimeError("no attention recorded; set record_attention = True and run forward")
        level_of = np.concatenate([np.full(g.region ** 2, i + 1) for i, g in enumerate(self.geometry)])
        a = self.last_attention[0]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["window", "head", "query", "key", "level", "valid", "weight"])
            for wi in range(a.shape[0]):
                for hd in range(a.shape[1]):
                    for qi in range(a.shape[2]):
                        for ki in range(a.shape[3]):
                            wr.writerow([wi, hd, qi, ki, int(level_of[ki]), int(self.mask[wi, ki]),
                                         f"{a[wi, hd, qi, ki]:.8g}"])


def focal_attention_forward(x: Tensor, config: FocalConfig, params: FocalAttention) -> Tensor:
    """Focal attention on a channels-first map (d, H, W) or batch (N, d, H, W)."""
    if params.config != config:
        raise ValueError("params were built for a different FocalConfig")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise DimensionError(f"expected (d,H,W) or (N,d,H,W), got {x.shape}")
    config.validate(tuple(x.shape[-2:]))
    t = x if batched else ops.reshape(x, (1,) + x.shape)
    y = ops.transpose(params(ops.transpose(t, (0, 2, 3, 1))), (0, 3, 1, 2))
    return y if batched else ops.reshape(y, y.shape[1:])


# -- reference: dense global attention ------------------------------------------------

def degenerate_config(size: int, dim: int, heads: int) -> FocalConfig:
    """Single raw-token level whose window and region cover the whole ``size x size`` map."""
    return FocalConfig(levels=1, window=size, sub_windows=(1,), regions=(size,), heads=heads, dim=dim)


def global_attention(x: Tensor, module: FocalAttention, bias: np.ndarray | None = None) -> Tensor:
    """Every token attends to every token, using ``module``'s projections.

    ``x`` is (N, H, W, d); ``bias`` an optional (heads, HW, HW) additive logit term.
    """
    n, h, w, d = x.shape
    heads = module.config.heads
    dh = d // heads
    t = ops.reshape(x, (n, h * w, d))
    q = ops.transpose(ops.reshape(module.q(t), (n, h * w, heads, dh)), (0, 2, 1, 3))
    kv = ops.reshape(module.kv(t), (n, h * w, 2, heads, dh))
    k_t = ops.transpose(kv[:, :, 0], (0, 2, 3, 1))
    v = ops.transpose(kv[:, :, 1], (0, 2, 1, 3))
    logits = ops.matmul(ops.scale(q, 1.0 / math.sqrt(dh)), k_t)  # (n, heads, HW, HW)
    if bias is not None:
        logits = ops.add(logits, Tensor(bias))
    out = ops.matmul(ops.softmax(logits, axis=-1), v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (n, h, w, d))
    return module.proj(out)
