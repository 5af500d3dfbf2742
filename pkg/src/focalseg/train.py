"""SGD training loop, checkpointing and evaluation."""

from __future__ import annotations

import contextlib
import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data import BatchLoader, PhantomDataset
from .losses import LossWeights, one_hot, reg_loss, seg_loss, total_loss
from .metrics import MetricsRecord, aggregate, evaluate_case, write_metrics_csv
from .model import FocalUNETR, ModelConfig, preset
from .nn import Module
from .tensor import Tensor, no_grad, precision
from .tensor.archive import load_archive, save_archive

LOG_HEADER = ("epoch", "lr", "train_loss", "val_dsc", "val_hd95")


class TrainingError(RuntimeError):
    """Non-finite loss or another unrecoverable condition during training."""


class CheckpointMismatch(ValueError):
    """Checkpoint parameters do not fit the requested model configuration."""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: preset("desk"))
    loss: LossWeights = field(default_factory=LossWeights)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    base_lr: float = 0.01
    gamma: float = 0.95
    epochs: int = 30
    batch_size: int = 24
    eval_batch_size: int = 8
    seed: int = 0
    precision: str = "single"
    deterministic: bool = True
    augment: bool = True
    reg_form: str = "mse"
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def validate(self) -> None:
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")
        self.model.validate()

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["loss"] = asdict(self.loss)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        model = d.pop("model", None)
        if isinstance(model, str):
            model = preset(model)
        elif isinstance(model, dict):
            base = model.pop("preset", None)
            model = preset(base, **model) if base else ModelConfig.from_dict(model)
        loss = LossWeights(**d.pop("loss")) if "loss" in d else LossWeights()
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown run config keys: {unknown}")
        return cls(model=model or preset("desk"), loss=loss, **d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def lr_at(epoch: int, base_lr: float = 0.01, gamma: float = 0.95) -> float:
    """Exponential schedule, ``epoch`` counted from 0."""
    return base_lr * gamma ** epoch


class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[Optional[np.ndarray]] = [None] * len(self.params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self.buffers[i]
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[i] = buf
            p.data = (p.data - self.lr * buf).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@contextlib.contextmanager
def compute_threads(deterministic: bool):
    """Cap BLAS threads: one in deterministic mode, else ``FOCALSEG_THREADS`` if set."""
    env = os.environ.get("FOCALSEG_THREADS")
    limit = 1 if deterministic else (int(env) if env else None)
    if limit is None:
        yield
        return
    with threadpool_limits(limits=limit):
        yield


def worker_threads() -> int:
    env = os.environ.get("FOCALSEG_THREADS")
    return max(1, int(env)) if env else 1


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(path, model: Module, config: ModelConfig, meta: Optional[dict] = None) -> None:
    path = Path(path)
    save_archive(path, {f"param/{k}": v for k, v in model.state_dict().items()})
    info = {"model": config.to_dict(), **(meta or {})}
    path.with_suffix(".json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> tuple[FocalUNETR, ModelConfig, dict]:
    """Rebuild a model from ``path`` (+ its JSON sidecar); ``config`` must agree if given."""
    path = Path(path)
    side = path.with_suffix(".json")
    if not path.exists() or not side.exists():
        raise FileNotFoundError(f"checkpoint {path} or its sidecar {side} is missing")
    info = json.loads(side.read_text())
    stored = ModelConfig.from_dict(info["model"])
    if config is not None and config.to_dict() != stored.to_dict():
        raise CheckpointMismatch("checkpoint was trained with a different model configuration")
    model = FocalUNETR(stored)
    state = {k[len("param/"):]: v for k, v in load_archive(path).items()}
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointMismatch(str(exc)) from exc
    return model, stored, info


# -- evaluation ---------------------------------------------------------------------

def predict(model: FocalUNETR, images: np.ndarray, batch_size: int = 8) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Argmax label maps (N, H, W) and heatmaps (N, H, W) or None."""
    labels, heats = [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out = model(Tensor(images[i:i + batch_size]))
            labels.append(out.seg_probs.data.argmax(axis=1))
            if out.boundary_heatmap is not None:
                heats.append(out.boundary_heatmap.data[:, 0])
    if not labels:
        return np.zeros((0,) + images.shape[2:], np.int64), None
    return np.concatenate(labels), (np.concatenate(heats) if heats else None)


def evaluate_model(model: FocalUNETR, dataset: PhantomDataset, batch_size: int = 8,
                   spacing=None) -> list[MetricsRecord]:
    labels, _ = predict(model, dataset.images, batch_size)
    return [evaluate_case(cid, labels[i] > 0, dataset.masks[i] > 0, spacing) for i, cid in enumerate(dataset.ids)]


# -- training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    log_path: Path
    best_checkpoint: Path
    first_checkpoint: Path
    best_epoch: int
    best_val_dsc: float
    rows: list[dict]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def _nan_dump(out_dir: Path, epoch: int, step: int, ids, parts: dict, model: Module) -> Path:
    dump = {
        "epoch": epoch,
        "step": step,
        "batch_ids": list(ids),
        "loss_parts": {k: float(v) for k, v in parts.items()},
        "param_abs_max": {k: float(np.abs(v).max()) for k, v in model.state_dict().items()},
        "non_finite_params": [k for k, v in model.state_dict().items() if not np.isfinite(v).all()],
    }
    path = out_dir / "nan_dump.json"
    path.write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
    return path


def train_step(model: FocalUNETR, batch, weights: LossWeights, reg_form: str = "mse"):
    """Forward + backward on one batch; returns (total, parts) with gradients accumulated."""
    out = model(Tensor(batch.images))
    target = one_hot(batch.masks, model.config.num_classes)
    l_seg = seg_loss(out.seg_probs, target)
    parts = {"seg": l_seg.item()}
    use_reg = weights.lambda2 > 0 and out.boundary_heatmap is not None
    l_reg = reg_loss(out.boundary_heatmap, batch.heatmaps, reg_form) if use_reg else None
    if l_reg is not None:
        parts["reg"] = l_reg.item()
    loss = total_loss(l_seg, l_reg, weights)
    parts["total"] = loss.item()
    if math.isfinite(parts["total"]):
        loss.backward()
    return parts


def train(config: RunConfig, log=print) -> TrainResult:
    """Train per ``config``; writes ``train_log.csv``, ``best.ckpt`` and ``first.ckpt`` in ``out_dir``."""
    config.validate()
    out_dir = Path(config.out_dir)
    data_dir = Path(config.data_dir)
    if not (data_dir / "manifest.csv").exists():
        raise FileNotFoundError(f"no dataset at {data_dir} (missing manifest.csv)")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    with precision(config.precision), compute_threads(config.deterministic):
        size = tuple(config.model.img_size)
        train_set = PhantomDataset(data_dir, "train", size)
        val_set = PhantomDataset(data_dir, "val", size)
        if len(train_set) == 0:
            raise ValueError("training split is empty")
        model = FocalUNETR(config.model, seed=config.seed)
        opt = SGD(model.parameters(), config.base_lr, config.momentum, config.weight_decay)
        loader = BatchLoader(train_set, config.batch_size, seed=config.seed, augment_data=config.augment,
                             prefetch=1 + worker_threads())
        best = (-1.0, -1)
        rows = []
        log_path = out_dir / "train_log.csv"
        with open(log_path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(LOG_HEADER)
            for epoch in range(config.epochs):
                opt.lr = lr_at(epoch, config.base_lr, config.gamma)
                losses, counts = [], []
                for step, batch in enumerate(loader.epoch(epoch)):
                    opt.zero_grad()
                    parts = train_step(model, batch, config.loss, config.reg_form)
                    if not math.isfinite(parts["total"]):
                        dump = _nan_dump(out_dir, epoch, step, batch.ids, parts, model)
                        raise TrainingError(f"non-finite loss at epoch {epoch} step {step}; diagnostics in {dump}")
                    opt.step()
                    losses.append(parts["total"])
                    counts.append(len(batch.ids))
                train_loss = float(np.average(losses, weights=counts))
                recs = evaluate_model(model, val_set, config.eval_batch_size) if len(val_set) else []
                agg = aggregate(recs) if recs else None
                val_dsc = agg.dsc_mean if agg else math.nan
                val_hd = agg.hd95_mean if agg else math.nan
                row = {"epoch": epoch, "lr": opt.lr, "train_loss": train_loss, "val_dsc": val_dsc, "val_hd95": val_hd}
                rows.append(row)
                wr.writerow([epoch, _fmt(opt.lr), _fmt(train_loss), _fmt(val_dsc), _fmt(val_hd)])
                fh.flush()
                meta = {"epoch": epoch, "val_dsc": val_dsc, "val_hd95": val_hd, "seed": config.seed}
                if epoch == 0:
                    save_checkpoint(out_dir / "first.ckpt", model, config.model, meta)
                score = val_dsc if not math.isnan(val_dsc) else -train_loss
                if score > best[0] or best[1] < 0:
                    best = (score, epoch)
                    save_checkpoint(out_dir / "best.ckpt", model, config.model, meta)
                log(f"epoch {epoch:3d}  lr {opt.lr:.5f}  loss {train_loss:.4f}  val_dsc {val_dsc:.4f}  val_hd95 {val_hd:.3f}")
    return TrainResult(log_path, out_dir / "best.ckpt", out_dir / "first.ckpt", best[1], best[0], rows)


def evaluate_checkpoint(checkpoint, data_dir, split: str = "test", out_csv=None, spacing=None,
                        config: Optional[ModelConfig] = None, batch_size: int = 8):
    """Metrics for every case of ``split``; optionally written to ``out_csv``."""
    model, cfg, _ = load_checkpoint(checkpoint, config)
    dataset = PhantomDataset(data_dir, split, tuple(cfg.img_size))
    recs = evaluate_model(model, dataset, batch_size, spacing)
    agg = write_metrics_csv(out_csv, recs) if out_csv is not None else aggregate(recs)
    return recs, agg
