import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import max_rel_err, numeric_grads, tape_grads
from sdtc import nn
from sdtc.config import ModelConfig, SMMLConfig
from sdtc.nn import ParamStore
from sdtc.smml import (SMCA, SMML, AdaptiveFuse, DetectionHead, SelfRefine, aggregate,
                       context_features, context_maps, cross_propagate,
                       pixel_context_relations)
from sdtc.tensor import ContractError, DimensionError, Tensor

GRID = (2, 2)


def rnd(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(scale=scale, size=shape)


def softmax_rows(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- aggregation -------------------------------------------------------------

def test_aggregate_single_frame_identity_conv():
    ps = ParamStore(0, np.float64)
    conv = nn.Conv1x1(ps, "agg", 4, 4)
    ps.set("agg.w", np.eye(4))
    seq = rnd((1, 6, 4))
    out = aggregate(Tensor(seq), conv, ps).data
    np.testing.assert_array_equal(out, seq[0].T)


def test_aggregate_channel_concat_order():
    ps = ParamStore(0, np.float64)
    conv = nn.Conv1x1(ps, "agg", 3 * 2, 2)
    w = rnd((2, 6), 1)
    ps.set("agg.w", w)
    seq = rnd((3, 48, 2), 2)
    out = aggregate(Tensor(seq), conv, ps).data
    stacked = np.concatenate([seq[t].T for t in range(3)], axis=0)  # (T*C, L)
    np.testing.assert_allclose(out, w @ stacked, atol=1e-12)
    assert out.shape == (2, 48)


def test_aggregate_gradient_fd():
    ps = ParamStore(0, np.float64)
    conv = nn.Conv1x1(ps, "agg", 6, 2)

    def f(seq, w, b):
        return (aggregate(seq, conv, ParamStore.view({"agg.w": w, "agg.b": b})) ** 2).sum()

    arrays = [rnd((3, 4, 2)), ps["agg.w"].data, rnd(2, 3)]
    for g, n in zip(tape_grads(f, *arrays), numeric_grads(f, *arrays)):
        assert max_rel_err(g, n) < 1e-6


# -- context maps and features -----------------------------------------------

def test_context_map_examples():
    o = context_maps(Tensor(np.full((4, 3), 2.5))).data
    np.testing.assert_allclose(o, 0.25)
    col = context_maps(Tensor(np.array([[0.0], [math.log(3.0)]]))).data
    np.testing.assert_allclose(col[:, 0], [0.25, 0.75], rtol=1e-12)


@given(st.integers(0, 10_000))
def test_context_maps_columns_and_relation_rows_sum_to_one(seed):
    x = Tensor(rnd((5, 6), seed, 3.0))
    o = context_maps(x)
    assert np.abs(o.data.sum(axis=0) - 1).max() < 1e-6
    rel = pixel_context_relations(x, context_features(x, o)).data
    assert rel.shape == (6, 5)
    assert np.abs(rel.sum(axis=-1) - 1).max() < 1e-6


def test_context_features_examples():
    o = Tensor(rnd((3, 4)))
    assert not context_features(Tensor(np.zeros((3, 4))), o).data.any()
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    unit = np.array([[0.0, 1.0], [0.0, 0.0]])  # only O[0, 1] = 1
    oc = context_features(Tensor(x), Tensor(unit)).data
    # OC[:, j] = sum_p X[:, p] O[j, p]  ->  column 0 picks X[:, 1], column 1 is zero
    np.testing.assert_array_equal(oc, [[2.0, 0.0], [4.0, 0.0]])
    assert context_features(Tensor(rnd((5, 7))), Tensor(rnd((5, 7), 1))).shape == (5, 5)
    with pytest.raises(DimensionError):
        context_features(Tensor(rnd((2, 3))), Tensor(rnd((2, 4))))


def test_self_refine_hand_instance():
    """2 channels, 2 pixels, every step of the refinement written out."""
    x = np.array([[1.0, -1.0], [0.5, 2.0]])
    w = np.array([[0.3, -0.2], [0.1, 0.4]])
    b = np.array([0.05, -0.1])
    # channel softmax per pixel
    o = np.zeros((2, 2))
    for p in range(2):
        e = [math.exp(x[c, p]) for c in range(2)]
        o[:, p] = [v / sum(e) for v in e]
    oc = np.array([[sum(x[i, p] * o[j, p] for p in range(2)) for j in range(2)] for i in range(2)])
    logits = np.array([[sum(x[c, p] * oc[c, j] for c in range(2)) for j in range(2)] for p in range(2)])
    rel = softmax_rows(logits)
    ctx = np.array([[sum(rel[p, j] * oc[i, j] for j in range(2)) for p in range(2)] for i in range(2)])
    conv = w @ ctx + b[:, None]

    for residual, expected in ((False, conv), (True, x + conv)):
        ps = ParamStore(0, np.float64)
        sr = SelfRefine(ps, "sr", 2, residual=residual)
        ps.set("sr.conv.w", w)
        ps.set("sr.conv.b", b)
        np.testing.assert_allclose(sr(Tensor(x), ps).data, expected, atol=1e-12)


def test_self_refine_shape_and_spatial_axis():
    ps = ParamStore(0, np.float64)
    x = Tensor(rnd((2, 8, 48)))
    assert SelfRefine(ps, "a", 8)(x, ps).shape == (2, 8, 48)
    sr = SelfRefine(ps, "b", 8, axis="spatial")
    regions = sr.contexts(x).regions.data
    assert np.abs(regions.sum(axis=-1) - 1).max() < 1e-6


# -- SMCA --------------------------------------------------------------------

def smca_store(c=4, seed=0):
    ps = ParamStore(seed, np.float64)
    return ps, SMCA(ps, "smca", c, GRID)


def test_smca_zero_values_reduces_to_phi():
    ps, m = smca_store()
    ps.set("smca.v.w", np.zeros((4, 4)))
    s, g = Tensor(rnd((4, 4))), Tensor(rnd((4, 4), 1))
    np.testing.assert_array_equal(m(s, g, ps).data, m.phi(s, ps).data)


def test_smca_tied_self_attention_equivalence():
    from test_nn import brute_attention
    ps, m = smca_store(seed=1)
    for proj in "qkv":
        ps.set(f"smca.{proj}.b", rnd(4, 7, 0.1))
    s = rnd((4, 4), 2)
    att, weights = m.attend(Tensor(s), Tensor(s), ps)
    p = {}
    for proj in "qkv":
        p[f"w{proj}"] = ps[f"smca.{proj}.w"].data.T
        p[f"b{proj}"] = ps[f"smca.{proj}.b"].data
    p["wo"], p["bo"] = np.eye(4), np.zeros(4)
    ref = brute_attention(s.T, p, heads=1).T  # tokens are the 4 pixel columns, d = C
    assert np.abs(att.data - ref).max() < 1e-6
    assert np.abs(weights.data.sum(-1) - 1).max() < 1e-6


def test_smca_shape_mismatch():
    ps, m = smca_store()
    with pytest.raises(DimensionError):
        m(Tensor(rnd((4, 4))), Tensor(rnd((4, 6))), ps)


def test_cross_propagate_reads_pre_update_inputs_and_is_symmetric():
    ps = ParamStore(0, np.float64)
    a, b = SMCA(ps, "a", 4, GRID), SMCA(ps, "b", 4, GRID)
    r, m = Tensor(rnd((4, 4), 1)), Tensor(rnd((4, 4), 2))
    r2, m2 = cross_propagate(r, m, a, b, ps)
    np.testing.assert_array_equal(r2.data, a(r, m, ps).data)
    np.testing.assert_array_equal(m2.data, b(m, r, ps).data)
    m3, r3 = cross_propagate(m, r, b, a, ps)
    np.testing.assert_array_equal(m3.data, m2.data)
    np.testing.assert_array_equal(r3.data, r2.data)
    ps.set("a.v.w", np.zeros((4, 4)))
    r4, m4 = cross_propagate(r, m, a, b, ps)
    np.testing.assert_array_equal(r4.data, a.phi(r, ps).data)
    np.testing.assert_array_equal(m4.data, m2.data)


# -- adaptive fusion ---------------------------------------------------------

def test_adaptive_fuse_zero_gates_is_half_half():
    ps = ParamStore(0, np.float64)
    fuse = AdaptiveFuse(ps, "f", 4, GRID)
    for fc in ("fc_s", "fc_m"):
        ps.set(f"f.{fc}.w", np.zeros((4, 4)))
        ps.set(f"f.{fc}.b", np.zeros(4))
    r, m = Tensor(rnd((4, 4), 1)), Tensor(rnd((4, 4), 2))
    gates = fuse.gates(r, m, ps)
    assert np.all(gates.a_s.data == 0.5) and np.all(gates.a_m.data == 0.5)
    expected = 0.5 * fuse.conv_s(r, ps).data + 0.5 * fuse.conv_m(m, ps).data
    np.testing.assert_array_equal(fuse(r, m, ps).data, expected)


def test_adaptive_fuse_hand_instance():
    """C=1, two pixels; spatial norm over the two pixels then ReLU."""
    ps = ParamStore(0, np.float64)
    fuse = AdaptiveFuse(ps, "f", 1, (1, 2))
    vals = {"f.mix.conv.w": [[0.5, -1.0]], "f.mix.conv.b": [0.2],
            "f.mix.norm.g": [1.5], "f.mix.norm.b": [0.1],
            "f.fc_s.w": [[2.0]], "f.fc_s.b": [-0.5], "f.fc_m.w": [[-1.0]], "f.fc_m.b": [0.3],
            "f.conv_s.w": [[3.0]], "f.conv_s.b": [0.0], "f.conv_m.w": [[-2.0]], "f.conv_m.b": [1.0]}
    for k, v in vals.items():
        ps.set(k, np.array(v, dtype=float))
    r, m = np.array([[1.0, 3.0]]), np.array([[2.0, -1.0]])
    pre = 0.5 * r - 1.0 * m + 0.2                       # [-1.3, 2.7]
    mu, var = pre.mean(), pre.var()
    a = np.maximum((pre - mu) / math.sqrt(var + 1e-5) * 1.5 + 0.1, 0.0)
    sig = lambda z: 1 / (1 + np.exp(-z))
    a_s, a_m = sig(2.0 * a - 0.5), sig(-1.0 * a + 0.3)
    expected = a_s * (3.0 * r) + a_m * (-2.0 * m + 1.0)
    np.testing.assert_allclose(fuse(Tensor(r), Tensor(m), ps).data, expected, atol=1e-12)


@given(st.integers(0, 10_000))
def test_gates_strictly_inside_unit_interval(seed):
    ps = ParamStore(seed, np.float64)
    fuse = AdaptiveFuse(ps, "f", 4, GRID)
    g = fuse.gates(Tensor(rnd((4, 4), seed, 3.0)), Tensor(rnd((4, 4), seed + 1, 3.0)), ps)
    for gate in (g.a_s.data, g.a_m.data):
        assert np.all((gate > 0) & (gate < 1))


# -- detection head and full module ------------------------------------------

def test_detection_head():
    cfg = ModelConfig()
    ps = ParamStore(0)
    head = DetectionHead(ps, "head", cfg)
    assert head(Tensor(rnd((64, 48))), ps).shape == (15, 16, 12)
    assert not head(Tensor(np.zeros((64, 48))), ps).data.any()
    with pytest.raises(ContractError):
        head(Tensor(rnd((64, 40))), ps)


def small_model_cfg():
    return ModelConfig(img_h=16, img_w=16, patch=8, channels=4, heads=2, delta=1,
                       heatmap_h=4, heatmap_w=4, num_joints=2)


@pytest.mark.parametrize("variant", [
    SMMLConfig(),
    SMMLConfig(refine_residual=False),
    SMMLConfig(fusion="add"),
    SMMLConfig(fusion="conv"),
    SMMLConfig(self_refine=False),
    SMMLConfig(cross_propagate=False),
    SMMLConfig(adaptive_fuse=False),
    SMMLConfig(context_axis="spatial", norm="none"),
])
def test_smml_variants_gradient_fd(variant):
    m = small_model_cfg()
    ps = ParamStore(5, np.float64)
    smml = SMML(ps, "smml", m, variant)
    head = DetectionHead(ps, "head", m)
    names = ps.names()
    spatial, motion = rnd((3, 4, 4), 1), rnd((3, 4, 4), 2)

    def f(s, mo, *ws):
        view = ParamStore.view(dict(zip(names, ws)))
        return (head(smml(s, mo, view), view) ** 2).mean()

    arrays = [spatial, motion] + [ps[n].data for n in names]
    f_a = f(*[Tensor(a) for a in arrays]).item()
    assert f_a == f(*[Tensor(a) for a in arrays]).item()
    errs = [max_rel_err(g, n) for g, n in zip(tape_grads(f, *arrays), numeric_grads(f, *arrays))]
    assert max(errs) < 1e-4
