"""FocalUNETR: focal-transformer encoder, convolutional U-shaped decoder, two heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .attention import FocalAttention, FocalConfig
from .nn import Conv2d, ConvTranspose2d, LayerNorm, Linear, Mlp, Module
from .tensor import DimensionError, Tensor, ops


@dataclass
class ModelConfig:
    in_channels: int = 1
    img_size: tuple[int, int] = (128, 128)
    patch_size: tuple[int, int] = (2, 2)
    embed_dim: int = 32
    depths: tuple[int, ...] = (1, 1, 2, 1)
    heads: tuple[int, ...] = (4, 8, 16, 32)
    focal_levels: int = 2
    focal_window: int = 7
    focal_sub_windows: Optional[tuple[int, ...]] = None  # default (1, window, ...)
    focal_regions: tuple[int, ...] = (7, 3)
    mlp_ratio: float = 4.0
    num_classes: int = 2
    dual_head: bool = True
    decoder: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_dims(self) -> list[int]:
        return [self.embed_dim * 2 ** k for k in range(self.num_stages)]

    def stage_resolutions(self) -> list[tuple[int, int]]:
        h, w = self.token_grid()
        return [(h // 2 ** k, w // 2 ** k) for k in range(self.num_stages)]

    def token_grid(self) -> tuple[int, int]:
        return (-(-self.img_size[0] // self.patch_size[0]), -(-self.img_size[1] // self.patch_size[1]))

    def stage_heads(self) -> list[int]:
        out = []
        for k, dim in enumerate(self.stage_dims()):
            h = min(self.heads[min(k, len(self.heads) - 1)], dim)
            while dim % h:
                h -= 1
            out.append(h)
        return out

    def stage_focal_configs(self) -> list[FocalConfig]:
        subs = self.focal_sub_windows or (1,) + (self.focal_window,) * (self.focal_levels - 1)
        cfgs = []
        for dim, heads, (h, w) in zip(self.stage_dims(), self.stage_heads(), self.stage_resolutions()):
            base = FocalConfig(self.focal_levels, self.focal_window, tuple(subs), tuple(self.focal_regions), heads, dim)
            cfgs.append(base.for_map(h, w))
        return cfgs

    def decoder_widths(self) -> list[int]:
        """Channel width after each upsampling step, deepest first (ends at full resolution)."""
        dims = self.stage_dims()
        return dims[-2::-1] + [max(1, self.embed_dim // 2)] if dims else []

    def validate(self) -> None:
        h, w = self.img_size
        ph, pw = self.patch_size
        merges = max(self.num_stages - 1, 0)
        if h % (ph * 2 ** merges) or w % (pw * 2 ** merges):
            raise DimensionError(f"input {h}x{w} must be divisible by patch*2^{merges} = "
                                 f"{ph * 2 ** merges}x{pw * 2 ** merges}")
        if self.decoder and self.num_stages == 0:
            raise ValueError("the decoder needs at least one encoder stage")
        if self.decoder and ph != pw:
            raise ValueError("the decoder's final upsampling needs a square patch")
        for cfg, res in zip(self.stage_focal_configs(), self.stage_resolutions()):
            cfg.validate(res)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


PRESETS = {
    "toy": dict(img_size=(32, 32), embed_dim=8, depths=(1, 1, 1, 1), heads=(2, 2, 2, 2), focal_window=4,
                focal_regions=(4, 3)),
    "desk": dict(img_size=(128, 128), embed_dim=32, depths=(1, 1, 2, 1)),
    "desk-d48": dict(img_size=(128, 128), embed_dim=48, depths=(1, 1, 2, 1)),
    "desk-d64": dict(img_size=(128, 128), embed_dim=64, depths=(1, 1, 2, 1)),
    "full-d48": dict(img_size=(224, 224), embed_dim=48, depths=(2, 2, 6, 2)),
    "full-d64": dict(img_size=(224, 224), embed_dim=64, depths=(2, 2, 6, 2)),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


@dataclass
class ModelOutput:
    seg_logits: Tensor
    seg_probs: Tensor
    boundary_heatmap: Optional[Tensor] = None


# -- encoder pieces -----------------------------------------------------------------

class PatchEmbed(Module):
    """Non-overlapping patches linearly projected to ``dim`` channels (channels-last out)."""

    def __init__(self, in_ch: int, patch: tuple[int, int], dim: int, rng: np.random.Generator):
        self.patch = tuple(patch)
        self.proj = Linear(in_ch * patch[0] * patch[1], dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        ph, pw = self.patch
        if h % ph or w % pw:
            raise DimensionError(f"input {h}x{w} not divisible by patch {ph}x{pw}")
        t = ops.reshape(x, (n, c, h // ph, ph, w // pw, pw))
        t = ops.transpose(t, (0, 2, 4, 1, 3, 5))
        t = ops.reshape(t, (n, h // ph, w // pw, c * ph * pw))
        return self.proj(t)


class PatchMerge(Module):
    """Concatenate 2x2 token groups (4c) then project to 2c, halving resolution."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"patch merge needs an even token map, got {h}x{w}")
        t = ops.reshape(x, (n, h // 2, 2, w // 2, 2, c))
        t = ops.transpose(t, (0, 1, 3, 4, 2, 5))
        t = ops.reshape(t, (n, h // 2, w // 2, 4 * c))
        return self.reduction(self.norm(t))


class FocalBlock(Module):
    def __init__(self, cfg: FocalConfig, map_hw, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = FocalAttention(cfg, map_hw, rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.mlp = Mlp(cfg.dim, int(cfg.dim * mlp_ratio), rng)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attn(self.norm1(x)))
        return ops.add(x, self.mlp(self.norm2(x)))


class Stage(Module):
    def __init__(self, depth: int, cfg: FocalConfig, map_hw, mlp_ratio: float, rng, merge: bool):
        self.blocks = [FocalBlock(cfg, map_hw, mlp_ratio, rng) for _ in range(depth)]
        self.merge = PatchMerge(cfg.dim, rng) if merge else None

    def forward(self, x: Tensor):
        for blk in self.blocks:
            x = blk(x)
        return x, (self.merge(x) if self.merge is not None else None)


# -- decoder pieces -----------------------------------------------------------------

class ResBlock(Module):
    """conv3x3-IN-lrelu-conv3x3-IN + (1x1 conv-IN) shortcut, then lrelu."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, bias=False)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, bias=False)
        self.shortcut = Conv2d(c_in, c_out, 1, rng, bias=False) if c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.leaky_relu(ops.instance_norm_nhwc(self.conv1(x)))
        y = ops.instance_norm_nhwc(self.conv2(y))
        res = ops.instance_norm_nhwc(self.shortcut(x)) if self.shortcut is not None else x
        return ops.leaky_relu(ops.add(y, res))


class UpBlock(Module):
    def __init__(self, c_in: int, c_out: int, c_skip: int, stride: int, rng: np.random.Generator):
        self.up = ConvTranspose2d(c_in, c_out, stride, rng)
        self.res = ResBlock(c_out + c_skip, c_out, rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        u = self.up(x)
        if u.shape[:3] != skip.shape[:3]:
            raise DimensionError(f"skip {skip.shape} does not match upsampled {u.shape}")
        return self.res(ops.concat([u, skip], axis=-1))


class BoundaryHead(Module):
    """1x1 projection of the last decoder map to a single heatmap channel.

    The projection starts at zero: a He-initialized head predicts values of
    order 1 against mostly-zero targets, and that early regression error
    would dominate the shared decoder's gradient during the first epoch.
    """

    def __init__(self, c: int, rng: np.random.Generator):
        self.out = Conv2d(c, 1, 1, rng)
        self.out.weight.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return self.out(x)


class FocalUNETR(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        dims = config.stage_dims()
        self.patch_embed = PatchEmbed(config.in_channels, config.patch_size, config.embed_dim, rng)
        self.stages = []
        for k, (depth, cfg, res) in enumerate(zip(config.depths, config.stage_focal_configs(),
                                                  config.stage_resolutions())):
            self.stages.append(Stage(depth, cfg, res, config.mlp_ratio, rng, merge=k < config.num_stages - 1))
        self.norm = LayerNorm(dims[-1]) if dims else None
        if config.decoder:
            widths = config.decoder_widths()
            self.stem = ResBlock(config.in_channels, widths[-1], rng)
            self.ups = []
            c_prev = dims[-1]
            for i, width in enumerate(widths[:-1]):
                self.ups.append(UpBlock(c_prev, width, width, 2, rng))
                c_prev = width
            self.ups.append(UpBlock(c_prev, widths[-1], widths[-1], config.patch_size[0], rng))
            self.seg_head = Conv2d(widths[-1], config.num_classes, 1, rng)
            # created last so that toggling it leaves every other initial weight unchanged
            self.boundary_head = BoundaryHead(widths[-1], rng) if config.dual_head else None

    def encode_tokens(self, x: Tensor):
        """Channels-last stage maps and bottleneck for an (N, C, H, W) batch."""
        t = self.patch_embed(x)
        if not self.stages:
            return [t], None
        maps = []
        for stage in self.stages:
            out, merged = stage(t)
            maps.append(out)
            if merged is not None:
                t = merged
        return maps, self.norm(out)

    def encode(self, x: Tensor):
        """Channels-first stage maps (N, D*2^k, h_k, w_k) and the normalized bottleneck."""
        maps, bottleneck = self.encode_tokens(x)
        to_cf = lambda t: ops.transpose(t, (0, 3, 1, 2)) if t is not None else None  # noqa: E731
        return [to_cf(m) for m in maps], to_cf(bottleneck)

    def decode_tokens(self, maps: list[Tensor], bottleneck: Tensor, x: Tensor):
        """Channels-last decoder: returns (seg logits, heatmap or None), both (N, H, W, c)."""
        if len(maps) != len(self.stages):
            raise DimensionError(f"decoder expects {len(self.stages)} stage maps, got {len(maps)}")
        y = bottleneck
        for up, skip in zip(self.ups[:-1], maps[-2::-1]):
            y = up(y, skip)
        feats = self.ups[-1](y, self.stem(ops.transpose(x, (0, 2, 3, 1))))
        logits = self.seg_head(feats)
        heat = self.boundary_head(feats) if self.boundary_head is not None else None
        return logits, heat

    def decode(self, maps: list[Tensor], bottleneck: Tensor, x: Tensor):
        """Channels-first wrapper of :meth:`decode_tokens`."""
        to_cl = lambda t: ops.transpose(t, (0, 2, 3, 1))  # noqa: E731
        logits, heat = self.decode_tokens([to_cl(m) for m in maps], to_cl(bottleneck), x)
        to_cf = lambda t: ops.transpose(t, (0, 3, 1, 2))  # noqa: E731
        return to_cf(logits), (to_cf(heat) if heat is not None else None)

    def forward(self, x: Tensor) -> ModelOutput:
        squeeze = x.ndim == 3
        if squeeze:
            x = ops.reshape(x, (1,) + x.shape)
        c, h, w = x.shape[1:]
        if (c, h, w) != (self.config.in_channels,) + tuple(self.config.img_size):
            raise DimensionError(f"model expects {(self.config.in_channels,) + tuple(self.config.img_size)}, "
                                 f"got {x.shape[1:]}")
        if not self.config.decoder:
            raise RuntimeError("model built without a decoder; use encode()")
        maps, bottleneck = self.encode_tokens(x)
        logits, heat = self.decode_tokens(maps, bottleneck, x)
        probs = ops.transpose(ops.softmax(logits, axis=-1), (0, 3, 1, 2))
        logits = ops.transpose(logits, (0, 3, 1, 2))
        heat = ops.transpose(heat, (0, 3, 1, 2)) if heat is not None else None
        if squeeze:
            logits, probs = ops.reshape(logits, logits.shape[1:]), ops.reshape(probs, probs.shape[1:])
            heat = ops.reshape(heat, heat.shape[1:]) if heat is not None else None
        return ModelOutput(logits, probs, heat)


def encoder_forward(x: Tensor, config: ModelConfig, params: FocalUNETR):
    if params.config != config:
        raise ValueError("params were built for a different ModelConfig")
    return params.encode(x)


def decoder_forward(maps: list[Tensor], x: Tensor, params: FocalUNETR, bottleneck: Tensor | None = None):
    """Channels-first stage maps + raw input -> (seg logits, heatmap or None)."""
    if bottleneck is None:
        bottleneck = ops.transpose(params.norm(ops.transpose(maps[-1], (0, 2, 3, 1))), (0, 3, 1, 2))
    return params.decode(maps, bottleneck, x)


def patch_embed(x: Tensor, config: ModelConfig, params: FocalUNETR) -> Tensor:
    """(C, H, W) -> channels-first token map (D, H/H', W/W')."""
    t = params.patch_embed(ops.reshape(x, (1,) + x.shape))
    return ops.transpose(ops.reshape(t, t.shape[1:]), (2, 0, 1))


def patch_merge(x: Tensor, merge: PatchMerge) -> Tensor:
    """(c, h, w) -> (2c, h/2, w/2)."""
    t = merge(ops.reshape(ops.transpose(x, (1, 2, 0)), (1,) + x.shape[1:] + (x.shape[0],)))
    return ops.transpose(ops.reshape(t, t.shape[1:]), (2, 0, 1))


def param_count(config: ModelConfig) -> int:
    return FocalUNETR(config).num_parameters()


def summary(model: FocalUNETR) -> list[tuple[str, int]]:
    """Per-module parameter totals (two-level name prefix)."""
    totals: dict[str, int] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if len(parts) > 2 else parts[0]
        totals[key] = totals.get(key, 0) + p.size
    return list(totals.items())
