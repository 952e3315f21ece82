import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffnet.model import ModelConfig
from diffnet.text import generate_synthetic
from diffnet.train import (AdamState, CheckpointError, TrainConfig, adam_step, clip_gradients, fit, global_norm,
                           load_checkpoint, save_checkpoint, train)

SMALL = ModelConfig(embed_dim=8, hidden=6, dropout=0.2)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(80, seed=11)


@pytest.fixture(scope="module")
def run(data):
    tcfg = TrainConfig(epochs=3, batch_size=16, seed=5)
    return fit(data[:64], SMALL, tcfg, data[64:])


# ------------------------------------------------------------------- config


def test_train_config_defaults():
    t = TrainConfig()
    assert (t.lr, t.lr_decay, t.clip_norm, t.batch_size, t.epochs) == (0.001, 0.8, 5.0, 32, 20)
    assert (t.beta1, t.beta2, t.eps) == (0.9, 0.999, 1e-8)


@pytest.mark.parametrize("kw", [{"lr": 0}, {"lr_decay": 0}, {"lr_decay": 1.5}, {"clip_norm": -1},
                                {"batch_size": 0}, {"epochs": 0}])
def test_train_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_lr_schedule_exact():
    t = TrainConfig()
    assert t.lr_at(2) == 0.00064
    for k in range(30):
        assert t.lr_at(k) == float(Fraction(1, 1000) * Fraction(4, 5) ** k)


# ----------------------------------------------------------------- clipping


def test_clip_under_threshold_unchanged():
    g = {"a": np.array([1.5, 2.0])}
    assert global_norm(g) == 2.5
    out = clip_gradients(g)
    np.testing.assert_array_equal(out["a"], g["a"])


def test_clip_halves_norm_ten():
    g = {"a": np.array([6.0]), "b": np.array([[8.0]])}
    out = clip_gradients(g)
    assert global_norm(out) == pytest.approx(5.0, abs=1e-12)
    np.testing.assert_allclose(out["a"], [3.0])
    np.testing.assert_allclose(out["b"], [[4.0]])


def test_clip_zero():
    out = clip_gradients({"a": np.zeros(3)})
    np.testing.assert_array_equal(out["a"], 0.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_clip_bound(values):
    out = clip_gradients({"a": np.array(values)})
    assert global_norm(out) <= 5 + 1e-9


# --------------------------------------------------------------------- adam


def test_adam_zero_gradient_no_move():
    p = {"w": np.array([1.0, -2.0])}
    new = adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adam_first_step_magnitude_is_lr():
    new = adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, AdamState(), 0.001)
    assert float(new["w"]) == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-18)


def test_adam_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=100)
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    x, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    state = AdamState()
    p = {"x": np.array(0.3)}
    for g in grads:
        p = adam_step(p, {"x": np.array(g)}, state, lr)
    assert state.t == 100
    assert float(p["x"]) == pytest.approx(x, abs=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState(), 0.1)


# ----------------------------------------------------------------- training


def test_train_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        train({}, SMALL, [], TrainConfig())


def test_run_log_shape(run):
    assert [r["epoch"] for r in run.log] == [0, 1, 2]
    assert [r["lr"] for r in run.log] == [0.001, 0.0008, 0.00064]
    for r in run.log:
        assert {"loss", "cce", "cosine", "l2", "train_acc", "eval_acc", "eval_cosine"} <= set(r)
    assert len(run.steps) == 3 * 4
    assert all(s["clipped_norm"] <= 5 + 1e-9 for s in run.steps)
    assert run.best_epoch == max(range(3), key=lambda k: (run.log[k]["eval_acc"], -k))


def test_run_is_deterministic(data, run):
    again = fit(data[:64], SMALL, TrainConfig(epochs=3, batch_size=16, seed=5), data[64:])
    assert again.log == run.log
    for k in run.params:
        assert again.params[k].tobytes() == run.params[k].tobytes()


def test_different_seed_differs(data, run):
    other = fit(data[:64], SMALL, TrainConfig(epochs=1, batch_size=16, seed=6))
    assert other.params["score_w"].tobytes() != run.params["score_w"].tobytes()


def test_log_file(tmp_path, data):
    path = tmp_path / "log.jsonl"
    fit(data[:20], SMALL, TrainConfig(epochs=2, batch_size=8), log_path=path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2 and '"lr": 0.0008' in lines[1]


# -------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, run):
    path = tmp_path / "c.bin"
    save_checkpoint(run.best_params, path, SMALL, run.vocab, seed=5, epoch=run.best_epoch)
    ck = load_checkpoint(path, SMALL)
    assert ck.config == SMALL and ck.seed == 5 and ck.epoch == run.best_epoch
    assert ck.vocab.itos == run.vocab.itos
    assert list(ck.params) == list(run.best_params)
    for k, v in run.best_params.items():
        assert ck.params[k].tobytes() == v.tobytes() and ck.params[k].shape == v.shape


def test_checkpoint_config_mismatch_names_field(tmp_path, run):
    path = tmp_path / "c.bin"
    save_checkpoint(run.params, path, SMALL, run.vocab, seed=5, epoch=2)
    other = ModelConfig(embed_dim=8, hidden=7, dropout=0.2)
    with pytest.raises(CheckpointError, match="hidden"):
        load_checkpoint(path, other)


def test_checkpoint_corruption(tmp_path, run):
    path = tmp_path / "c.bin"
    save_checkpoint(run.params, path, SMALL, run.vocab, seed=5, epoch=2)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_not_a_checkpoint(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"hello world" * 10)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


def test_identical_runs_identical_checkpoints(tmp_path, data):
    blobs = []
    for i in range(2):
        tcfg = TrainConfig(epochs=1, batch_size=16, seed=9)
        res = fit(data[:32], SMALL, tcfg)
        path = tmp_path / f"{i}.bin"
        save_checkpoint(res.best_params, path, SMALL, res.vocab, 9, res.best_epoch, tcfg)
        blobs.append(path.read_bytes())
    assert blobs[0] == blobs[1]
