import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from styleaug._torch import state_hash
from styleaug.augment import AugmentationPolicy
from styleaug.dataset import Dataset, Sample
from styleaug.errors import ConfigError, TrainingDivergedError
from styleaug.segnet import SegNetConfig, build_model, load_checkpoint
from styleaug.trainer import (
    EpochRecord,
    TrainConfig,
    compute_loss,
    read_history,
    train,
    validation_pass,
    write_history,
)


def loss_oracle(logits, masks, bce_w, dice_w):
    """Float64 numpy restatement of the training loss."""
    x = np.asarray(logits, np.float64)
    y = np.asarray(masks, np.float64)
    p = 1 / (1 + np.exp(-x))
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    total = 0.0
    for k in range(x.shape[0]):
        soft = (2 * (p[k] * y[k]).sum() + 1) / (p[k].sum() + y[k].sum() + 1)
        total += bce_w * bce[k].mean() + dice_w * (1 - soft)
    return total / x.shape[0]


class Untouchable:
    def __getattr__(self, name):
        raise AssertionError(f"{name} accessed")


def tiny_model(seed=0, dropout=0.1):
    return build_model(SegNetConfig.preset("tiny", seed=seed, dropout_rate=dropout))


# ---------------------------------------------------------------- loss

def test_loss_matches_oracle(rng):
    logits = rng.normal(size=(3, 8, 8)) * 3
    masks = rng.random((3, 8, 8)) < 0.4
    got = compute_loss(torch.tensor(logits), torch.tensor(masks), (0.5, 1.0))
    assert float(got) == pytest.approx(loss_oracle(logits, masks, 0.5, 1.0), rel=1e-10)


def test_loss_near_zero_for_confident_correct():
    m = torch.zeros(1, 8, 8)
    m[0, 2:6, 2:6] = 1
    assert float(compute_loss((m * 2 - 1) * 30, m)) < 1e-6


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        compute_loss(torch.zeros(1, 4, 4), torch.zeros(1, 4, 5))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 20))
def test_loss_bounds(seed, scale):
    rng = np.random.default_rng(seed)
    logits = torch.tensor(rng.normal(size=(2, 6, 6)) * scale)
    masks = torch.tensor(rng.random((2, 6, 6)) < rng.random())
    dice_only = float(compute_loss(logits, masks, (0.0, 1.0)))
    assert 0.0 <= dice_only <= 1.0
    assert float(compute_loss(logits, masks, (1.0, 0.0))) >= 0.0


# ---------------------------------------------------------------- config / history

@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(epochs=0), dict(val_every=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_echo_has_optimizer():
    d = TrainConfig(learning_rate=3e-4, seed=9).to_dict()
    assert d["optimizer"] == {"kind": "adam", "learning_rate": 3e-4}
    assert d["seed"] == 9 and d["policy"]["alpha"] == 0.5


def test_history_roundtrip(tmp_path):
    rows = [EpochRecord(1, 0.5, 0.6, 0.1), EpochRecord(2, 0.1 + 0.2, 1 / 3, 0.25)]
    write_history(rows, tmp_path / "h.csv")
    assert read_history(tmp_path / "h.csv") == rows
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,val_iou"


def test_history_wrong_columns(tmp_path):
    (tmp_path / "h.csv").write_text("epoch,loss\n1,0.5\n")
    with pytest.raises(ValueError):
        read_history(tmp_path / "h.csv")


# ---------------------------------------------------------------- loop

def test_one_epoch_smoke(tmp_path, small_data):
    tr, va, _ = small_data
    result = train(tiny_model(), tr, va, TrainConfig(epochs=1, seed=3), run_dir=tmp_path)
    assert len(result.history) == 1
    assert (tmp_path / "best.ckpt").exists() and result.checkpoint_path == tmp_path / "best.ckpt"
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 3
    assert len(read_history(tmp_path / "history.csv")) == 1


def test_runs_are_reproducible(tmp_path, small_data, small_stylizer):
    tr, va, _ = small_data
    st_, prior = small_stylizer
    cfg = TrainConfig(epochs=3, learning_rate=1e-3, seed=5, policy=AugmentationPolicy(True, True))
    a = train(tiny_model(1), tr, va, cfg, st_, prior, tmp_path / "a")
    b = train(tiny_model(1), tr, va, cfg, st_, prior, tmp_path / "b")
    assert a.history == b.history
    ma, _ = load_checkpoint(tmp_path / "a" / "best.ckpt")
    mb, _ = load_checkpoint(tmp_path / "b" / "best.ckpt")
    assert state_hash(ma) == state_hash(mb)


def test_checkpoint_holds_best_iou(tmp_path, small_data):
    tr, va, _ = small_data
    result = train(tiny_model(2), tr, va, TrainConfig(epochs=6, learning_rate=3e-3, seed=1), run_dir=tmp_path)
    model, meta = load_checkpoint(tmp_path / "best.ckpt")
    ious = result.column("val_iou")
    assert meta["best_val_iou"] == ious.max() == result.best_val_iou
    assert meta["epoch"] == result.best_epoch == int(np.argmax(ious)) + 1
    assert validation_pass(model, va)[1] == result.best_val_iou


def test_style_off_never_touches_stylizer(small_data):
    tr, va, _ = small_data
    cfg = TrainConfig(epochs=2, seed=0, policy=AugmentationPolicy(False, False))
    plain = train(tiny_model(dropout=0.0), tr, va, cfg)
    poked = train(tiny_model(dropout=0.0), tr, va, cfg, Untouchable(), Untouchable())
    assert plain.column("train_loss").tolist() == poked.column("train_loss").tolist()


def test_style_on_requires_stylizer(small_data):
    tr, va, _ = small_data
    with pytest.raises(ConfigError):
        train(tiny_model(), tr, va, TrainConfig(epochs=1, policy=AugmentationPolicy(style_enabled=True)))


def test_non_finite_loss_names_epoch(small_data):
    tr, va, _ = small_data
    bad = [Sample(np.full_like(s.image, np.nan), s.mask, s.id) for s in tr]
    with pytest.raises(TrainingDivergedError, match="epoch 1") as exc:
        train(tiny_model(), Dataset(bad, "train"), va, TrainConfig(epochs=2))
    assert exc.value.epoch == 1


def test_empty_sets_rejected(small_data):
    tr, va, _ = small_data
    with pytest.raises(ValueError):
        train(tiny_model(), Dataset([], "train"), va, TrainConfig(epochs=1))


def test_validation_pass_deterministic(small_data):
    model = tiny_model(4)
    assert validation_pass(model, small_data[1]) == validation_pass(model, small_data[1])
