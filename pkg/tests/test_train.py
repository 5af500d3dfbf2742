import csv
import json
import math

import numpy as np
import pytest

from focalseg import data as D
from focalseg import model as M
from focalseg.losses import LossWeights
from focalseg.metrics import FLAG_HD_UNDEFINED
from focalseg.tensor import Tensor
from focalseg.train import (
    SGD, CheckpointMismatch, RunConfig, TrainingError, evaluate_checkpoint, load_checkpoint, lr_at,
    save_checkpoint, train,
)


def _cfg(tiny_data, out, **kw):
    base = dict(model="toy", epochs=2, batch_size=4, data_dir=str(tiny_data), out_dir=str(out))
    return RunConfig.from_dict({**base, **kw})


def _losses(path):
    with open(path) as fh:
        return [row["train_loss"] for row in csv.DictReader(fh)]


def test_learning_rate_schedule():
    assert lr_at(0) == 0.01
    assert lr_at(1, gamma=0.95) == pytest.approx(0.0095)
    assert lr_at(10, 0.1, 0.5) == pytest.approx(0.1 / 1024)


def test_sgd_matches_hand_update():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.01)
    p.grad = np.array([0.5, 0.5])
    opt.step()
    g1 = np.array([0.5, 0.5]) + 0.01 * np.array([1.0, -2.0])
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) - 0.1 * g1)
    prev = p.data.copy()
    p.grad = np.array([0.5, 0.5])
    opt.step()
    g2 = np.array([0.5, 0.5]) + 0.01 * prev
    np.testing.assert_allclose(p.data, prev - 0.1 * (0.9 * g1 + g2))


def test_run_config_round_trip_and_validation(tmp_path):
    cfg = RunConfig.from_dict({"model": {"preset": "toy", "embed_dim": 16}, "loss": {"lambda1": 1.0, "lambda2": 0.0}})
    assert cfg.model.embed_dim == 16 and cfg.loss == LossWeights(1.0, 0.0)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert RunConfig.from_json(path).to_dict() == cfg.to_dict()
    assert RunConfig().batch_size == 24 and RunConfig().gamma == 0.95
    for bad in (dict(base_lr=0.0), dict(gamma=1.5), dict(epochs=0), dict(precision="half")):
        with pytest.raises(ValueError):
            RunConfig.from_dict(bad).validate()
    with pytest.raises(ValueError):
        RunConfig.from_dict({"learning_rate": 0.1})


def test_training_writes_log_and_checkpoints(tiny_data, tmp_path):
    res = train(_cfg(tiny_data, tmp_path / "r"), log=lambda s: None)
    lines = res.log_path.read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_dsc,val_hd95"
    assert len(lines) == 3
    assert float(lines[1].split(",")[1]) == 0.01 and float(lines[2].split(",")[1]) == pytest.approx(0.0095)
    assert res.best_checkpoint.exists() and res.first_checkpoint.exists()
    assert json.loads((tmp_path / "r" / "run_config.json").read_text())["model"]["embed_dim"] == 8
    model, cfg, info = load_checkpoint(res.best_checkpoint)
    assert cfg == M.preset("toy") and info["epoch"] == res.best_epoch


def test_training_is_bit_reproducible(tiny_data, tmp_path):
    a = train(_cfg(tiny_data, tmp_path / "a"), log=lambda s: None)
    b = train(_cfg(tiny_data, tmp_path / "b"), log=lambda s: None)
    assert a.log_path.read_bytes() == b.log_path.read_bytes()
    assert a.best_checkpoint.read_bytes() == b.best_checkpoint.read_bytes()
    c = train(_cfg(tiny_data, tmp_path / "c", seed=1), log=lambda s: None)
    assert c.log_path.read_bytes() != a.log_path.read_bytes()


def test_zero_lambda2_equals_single_head(tiny_data, tmp_path):
    off_w = train(_cfg(tiny_data, tmp_path / "w", loss={"lambda1": 0.5, "lambda2": 0.0}), log=lambda s: None)
    off_h = train(_cfg(tiny_data, tmp_path / "h", model={"preset": "toy", "dual_head": False}), log=lambda s: None)
    assert _losses(off_w.log_path) == _losses(off_h.log_path)


def test_training_loss_decreases(tmp_path):
    root = tmp_path / "d64"
    D.make_dataset(root, D.PhantomSpec(size=32, seed=11), n_total=64, fractions=(0.75, 0.125, 0.125))
    res = train(_cfg(root, tmp_path / "r", epochs=5, batch_size=8, base_lr=0.05), log=lambda s: None)
    losses = [float(x) for x in _losses(res.log_path)]
    smooth = np.convolve(losses, np.ones(2) / 2, mode="valid")  # two-epoch moving average
    assert smooth[-1] < smooth[0]
    assert losses[4] < losses[0]


def test_nan_loss_aborts_with_dump(tiny_data, tmp_path, monkeypatch):
    import focalseg.train as T

    def poisoned(model, batch, weights, reg_form="mse"):
        return {"seg": math.nan, "total": math.nan}

    monkeypatch.setattr(T, "train_step", poisoned)
    with pytest.raises(TrainingError):
        train(_cfg(tiny_data, tmp_path / "n"), log=lambda s: None)
    dump = json.loads((tmp_path / "n" / "nan_dump.json").read_text())
    assert dump["epoch"] == 0 and dump["step"] == 0 and len(dump["batch_ids"]) == 4


def test_missing_dataset_is_io_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        train(_cfg(tmp_path / "nowhere", tmp_path / "r"), log=lambda s: None)


def test_checkpoint_mismatch(tmp_path):
    m = M.FocalUNETR(M.preset("toy"))
    save_checkpoint(tmp_path / "m.ckpt", m, M.preset("toy"))
    load_checkpoint(tmp_path / "m.ckpt", M.preset("toy"))
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "m.ckpt", M.preset("toy", embed_dim=16))
    side = json.loads((tmp_path / "m.json").read_text())
    side["model"]["embed_dim"] = 16
    (tmp_path / "m.json").write_text(json.dumps(side))
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "m.ckpt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.ckpt")


def test_evaluate_checkpoint_rows_and_aggregate(tiny_data, tmp_path):
    m = M.FocalUNETR(M.preset("toy"))
    ck = tmp_path / "m.ckpt"
    save_checkpoint(ck, m, M.preset("toy"))
    recs, agg = evaluate_checkpoint(ck, tiny_data, "test", tmp_path / "out.csv", spacing=0.8)
    assert agg.n == len(recs) == 8
    assert agg.dsc_mean == pytest.approx(np.mean([r.dsc for r in recs]))
    defined = [r.hd95 for r in recs if r.hd_defined]
    if defined:
        assert agg.hd95_mean == pytest.approx(np.mean(defined))
    assert all(r.hd95_mm is None or math.isnan(r.hd95_mm) or r.hd95_mm == pytest.approx(0.8 * r.hd95)
               for r in recs)


def test_all_background_predictor_scores_zero(tiny_data):
    from focalseg.metrics import evaluate_case
    ds = D.PhantomDataset(tiny_data, "test")
    for cid, gt in zip(ds.ids, ds.masks):
        rec = evaluate_case(cid, np.zeros_like(gt), gt)
        assert rec.dsc == 0.0 and FLAG_HD_UNDEFINED in rec.flags
        same = evaluate_case(cid, gt, gt)
        assert same.dsc == 1.0 and same.hd95 == 0.0
