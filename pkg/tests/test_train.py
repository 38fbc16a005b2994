import math

import numpy as np
import pytest

from sdtc import checkpoint
from sdtc.config import RunConfig, parse_lines
from sdtc.data import collate, generate_dataset
from sdtc.model import SDTCModel
from sdtc.tensor import ContractError, NumericError, Tape
from sdtc.train import (OptimizerState, Trainer, clip_global_norm, compute_losses, evaluate,
                        lr_at, optimizer_step, predict, sample_rngs)

CFG = RunConfig()


@pytest.fixture(scope="module")
def data():
    return generate_dataset(4, CFG.model, CFG.data)


def small_cfg(*lines):
    cfg = parse_lines("\n".join(("train.batch_size = 2", *lines)))
    return cfg.validate()


# -- optimizer ---------------------------------------------------------------

def test_zero_gradient_only_decays():
    p = {"w": np.array([1.0, -2.0])}
    st = OptimizerState.zeros_like(p, weight_decay=0.1)
    out = optimizer_step(p, {"w": np.zeros(2)}, st, lr=0.01)
    np.testing.assert_allclose(out["w"], p["w"] * (1 - 0.01 * 0.1))


def test_first_step_hand_value():
    p = {"w": np.array([1.0])}
    st = OptimizerState.zeros_like(p, weight_decay=0.01)
    out = optimizer_step(p, {"w": np.array([0.5])}, st, lr=0.1)
    # bias-corrected moments equal g and g^2 on the first step
    assert abs(out["w"][0] - (1.0 * 0.999 - 0.1 * 0.5 / (0.5 + 1e-8))) < 1e-12
    assert st.step == 1


def test_second_step_hand_value():
    p = {"w": np.array([0.0])}
    st = OptimizerState.zeros_like(p, weight_decay=0.0)
    p = optimizer_step(p, {"w": np.array([1.0])}, st, lr=1.0)
    p = optimizer_step(p, {"w": np.array([-1.0])}, st, lr=1.0)
    m = (0.9 * 0.1 - 0.1) / (1 - 0.81)
    v = (0.999 * 0.001 + 0.001) / (1 - 0.999 ** 2)
    first = -1.0 / (1.0 + 1e-8)
    assert abs(p["w"][0] - (first - m / (math.sqrt(v) + 1e-8))) < 1e-12


def test_missing_gradient_rejected():
    p = {"a": np.ones(1), "b": np.ones(1)}
    with pytest.raises(ContractError, match="'b'"):
        optimizer_step(p, {"a": np.ones(1)}, OptimizerState.zeros_like(p), 0.1)


def test_lr_schedule():
    assert [lr_at(e, 5e-4, (20, 40), 0.1) for e in (0, 19)] == [5e-4, 5e-4]
    assert abs(lr_at(20, 5e-4, (20, 40), 0.1) - 5e-5) < 1e-18
    assert abs(lr_at(40, 5e-4, (20, 40), 0.1) - 5e-6) < 1e-18
    assert abs(lr_at(49, 5e-4, (20, 40), 0.1) - 5e-6) < 1e-18
    with pytest.raises(ContractError):
        lr_at(-1, 5e-4, (20, 40), 0.1)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    out = clip_global_norm(g, 1.0)
    np.testing.assert_allclose([out["a"][0], out["b"][0]], [0.6, 0.8])
    assert clip_global_norm(g, 10.0) is g


# -- losses on a batch -------------------------------------------------------

def test_mask_streams_independent_of_batch_position():
    a = sample_rngs(0, 3, [5, 9])[1].random(4)
    b = sample_rngs(0, 3, [9])[0].random(4)
    np.testing.assert_array_equal(a, b)


def test_compute_losses_deterministic(data):
    model = SDTCModel(CFG)
    batch = collate(data[:2], [0, 1])
    a = compute_losses(model, batch, rngs=sample_rngs(0, 0, [0, 1])).floats()
    b = compute_losses(model, batch, rngs=sample_rngs(0, 0, [0, 1])).floats()
    assert a == b
    assert a["L_total"] == pytest.approx(a["L_H"] + a["L_Rec"], rel=1e-6)


def test_lambda_zero_removes_context_gradient(data):
    batch = collate(data[:2], [0, 1])
    grads = {}
    for lam in (0.0, 0.01):
        cfg = parse_lines(f"loss.lam = {lam}").validate()
        model = SDTCModel(cfg)
        with Tape() as tape:
            tape.watch(model.ps.tensors())
            res = compute_losses(model, batch, rngs=sample_rngs(0, 0, [0, 1]))
        g = tape.backward(res.losses["L_total"])
        grads[lam] = {n: g[t] for n, t in model.ps.items()}
        if lam == 0.0:
            assert res.losses["L_ctx"].item() == 0.0
    diff = [n for n in grads[0.0] if not np.array_equal(grads[0.0][n], grads[0.01][n])]
    assert diff


def test_non_finite_forward_names_tensor(data):
    model = SDTCModel(CFG)
    name = next(n for n in model.ps.names() if n.startswith("head") and n.endswith(".b"))
    w = model.ps.state()[name].copy()
    w.flat[0] = np.nan
    model.ps.set(name, w)
    with pytest.raises(NumericError, match="heatmaps"):
        compute_losses(model, collate(data[:1], [0]), rngs=sample_rngs(0, 0, [0]))


# -- trainer -----------------------------------------------------------------

def test_training_reduces_loss_on_two_samples(data):
    cfg = small_cfg("train.milestones =", "train.epochs = 12")
    logs = Trainer(cfg).fit(data[:2], eval_each_epoch=False)
    assert logs[-1].L_H < logs[0].L_H
    assert math.isnan(logs[-1].eval_mean)
    assert [e.epoch for e in logs] == list(range(1, 13))


def test_same_seed_same_parameters(data):
    cfg = small_cfg("train.epochs = 2", "data.augment = true")
    a, b = Trainer(cfg), Trainer(cfg)
    la = a.fit(data, eval_each_epoch=False)
    lb = b.fit(data, eval_each_epoch=False)
    assert [e.format() for e in la] == [e.format() for e in lb]
    for name in a.ps.names():
        assert np.array_equal(a.ps.state()[name], b.ps.state()[name]), name


def test_resume_matches_uninterrupted(data, tmp_path):
    cfg = small_cfg("train.epochs = 3")
    full = Trainer(cfg)
    full.fit(data, eval_each_epoch=False)
    part = Trainer(cfg)
    part.fit(data, epochs=1, eval_each_epoch=False)
    part.save(tmp_path / "e1.sdtc")
    resumed = Trainer(cfg)
    resumed.load(tmp_path / "e1.sdtc")
    assert resumed.step == part.step
    resumed.fit(data, eval_each_epoch=False)
    for name in full.ps.names():
        assert np.array_equal(full.ps.state()[name], resumed.ps.state()[name]), name


def test_baseline_variant_trains(data):
    cfg = small_cfg("mlsme.enabled = false", "smml.fusion = add", "train.epochs = 1")
    logs = Trainer(cfg).fit(data[:2], eval_each_epoch=False)
    assert logs[0].L_Rec == 0.0 and np.isfinite(logs[0].L_H)


def test_evaluate_pure(data):
    model = SDTCModel(CFG)
    before = {k: v.copy() for k, v in model.ps.state().items()}
    a = evaluate(model, data)
    b = evaluate(model, data)
    assert a.format() == b.format()
    for k, v in model.ps.state().items():
        assert np.array_equal(v, before[k])
    lines = a.format().splitlines()
    assert len(lines) == 16 and lines[-1].startswith("mean ")


def test_predict_batch_size_invariant(data):
    model = SDTCModel(CFG)
    h1, j1 = predict(model, data, batch_size=1)
    h4, j4 = predict(model, data, batch_size=4)
    np.testing.assert_allclose(h1, h4, atol=1e-6)
    assert h1.shape == (4, 15, 16, 12) and j1.shape == (4, 15, 2)
    assert predict(model, [])[0].shape == (0, 15, 16, 12)


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path):
    model = SDTCModel(CFG)
    checkpoint.save(tmp_path / "m.sdtc", model.ps.state())
    back = checkpoint.load(tmp_path / "m.sdtc")
    assert set(back) == set(model.ps.names())
    for k, v in model.ps.state().items():
        assert back[k].dtype == np.float32 and np.array_equal(back[k], v)
    raw = (tmp_path / "m.sdtc").read_bytes()
    assert raw[:4] == b"SDTC"
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(raw[:-1])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(b"NOPE" + raw[4:])


def test_load_rejects_mismatched_model(tmp_path):
    checkpoint.save(tmp_path / "b.sdtc",
                    SDTCModel(parse_lines("mlsme.enabled = false").validate()).ps.state())
    with pytest.raises(ContractError, match="missing"):
        Trainer(CFG).load(tmp_path / "b.sdtc")


def test_optimizer_state_round_trip(tmp_path, data):
    t = Trainer(small_cfg("train.epochs = 1"))
    t.fit(data[:2], eval_each_epoch=False)
    t.save(tmp_path / "x.sdtc")
    assert (tmp_path / "x.opt.sdtc").exists()
    u = Trainer(small_cfg())
    u.load(tmp_path / "x.sdtc")
    assert u.step == t.step
    for k in t.state.m:
        assert np.array_equal(u.state.m[k], t.state.m[k]) and np.array_equal(u.state.v[k], t.state.v[k])
