"""CCTFA branch fusion and the SAFG skip gate."""

import numpy as np
import pytest

from catfa import tensor as T
from catfa.fusion import (cctfa, cctfa_vjp, cross_channel_attention, init_cctfa, init_safg, safg,
                          safg_gate_vjp, safg_vjp, spatial_attention)
from catfa.params import ParamStore


def fresh(init, dim, seed=0, scale=None, dtype=np.float64):
    store = ParamStore(dtype=dtype)
    P = store.scope()
    rng = np.random.default_rng(seed)
    init(P, rng, dim)
    if scale is not None:
        for p in store.params.values():
            p[...] = scale * rng.standard_normal(p.shape)
    return store, P


def zero_biases(store):
    for name, p in store.params.items():
        if name.endswith(".b"):
            p[...] = 0.0


# ---------------------------------------------------------------- CCTFA

def test_constant_inputs_give_uniform_channel_weights():
    _, P = fresh(init_cctfa, 4, scale=0.5)
    P["w1.w"][...] = 0.0
    P["w1.b"][...] = 0.0
    t = np.full((1, 4, 3, 3), 1.0)
    out = cross_channel_attention(P, t, np.full((1, 4, 3, 3), 2.0))
    np.testing.assert_allclose(out, 0.25, atol=1e-15)


def test_zero_transformer_features_give_zero():
    _, P = fresh(init_cctfa, 4, scale=0.5)
    c = np.random.default_rng(0).standard_normal((1, 4, 3, 3))
    np.testing.assert_array_equal(cross_channel_attention(P, np.zeros_like(c), c), 0.0)


def test_cross_channel_attention_matches_primitives():
    _, P = fresh(init_cctfa, 4, scale=0.5)
    rng = np.random.default_rng(1)
    t, c = rng.standard_normal((2, 4, 5, 5)), rng.standard_normal((2, 4, 5, 5))
    f = T.softmax(T.conv2d(t, P["w1.w"], P["w1.b"]) * T.conv2d(c, P["w2.w"], P["w2.b"]), axis=1)
    np.testing.assert_allclose(cross_channel_attention(P, t, c), f * T.global_avg_pool(t), atol=1e-10)


def test_channel_softmax_is_a_distribution():
    _, P = fresh(init_cctfa, 6, scale=1.0)
    P["w1.b"][...] = 0.0
    rng = np.random.default_rng(2)
    t, c = rng.standard_normal((1, 6, 4, 4)), rng.standard_normal((1, 6, 4, 4))
    # with a pooled value of 1 in every channel the output is the softmax itself
    t += 1.0 - t.mean(axis=(2, 3), keepdims=True)
    f = cross_channel_attention(P, t, c)
    assert np.all(f >= 0)
    np.testing.assert_allclose(f.sum(axis=1), 1.0, atol=1e-6)


def test_spatial_attention_zero_input():
    store, P = fresh(init_cctfa, 4, scale=0.5)
    zero_biases(store)
    np.testing.assert_array_equal(spatial_attention(P, np.zeros((1, 4, 5, 5))), 0.0)


def test_spatial_attention_matches_primitives():
    _, P = fresh(init_cctfa, 4, scale=0.5)
    c = np.random.default_rng(3).standard_normal((2, 4, 5, 6))
    g = T.conv2d(T.gelu(T.conv2d(c, P["p1a.w"], P["p1a.b"], padding=1)), P["p1b.w"], P["p1b.b"], padding=1)
    h = T.conv2d(T.channel_pool(c), P["p2.w"], P["p2.b"])
    out = spatial_attention(P, c)
    assert out.shape == c.shape
    np.testing.assert_allclose(out, np.repeat(g * h, 4, axis=1), atol=1e-12)


def test_cctfa_zero_inputs_give_zero():
    store, P = fresh(init_cctfa, 4, scale=0.5)
    zero_biases(store)
    z = np.zeros((1, 4, 4, 4))
    np.testing.assert_array_equal(cctfa(P, z, z), 0.0)


def test_cctfa_stage2_variant_s_shape():
    _, P = fresh(init_cctfa, 192, dtype=np.float32)
    z = np.random.default_rng(0).standard_normal((1, 192, 28, 28)).astype(np.float32)
    assert cctfa(P, z, z).shape == (1, 192, 28, 28)


def test_cctfa_batch_equivariance():
    _, P = fresh(init_cctfa, 4, scale=0.5)
    rng = np.random.default_rng(4)
    t, c = rng.standard_normal((3, 4, 4, 4)), rng.standard_normal((3, 4, 4, 4))
    perm = [2, 0, 1]
    np.testing.assert_allclose(cctfa(P, t[perm], c[perm]), cctfa(P, t, c)[perm], atol=1e-14)


def test_cctfa_shape_mismatch():
    _, P = fresh(init_cctfa, 4)
    with pytest.raises(T.ShapeError):
        cctfa_vjp(P, np.zeros((1, 4, 4, 4)), np.zeros((1, 4, 4, 2)))


# ---------------------------------------------------------------- SAFG

def test_uniform_gate_scales_ungated_sum_by_gelu_one():
    _, P = fresh(init_safg, 4, scale=0.5)
    P["psi.w"][...] = 0.0
    rng = np.random.default_rng(5)
    e, d = rng.standard_normal((1, 4, 5, 5)), rng.standard_normal((1, 4, 5, 5))
    translated = T.gelu(T.conv2d(T.depthwise_conv2d(d, P["trans_dw.w"], P["trans_dw.b"], padding=1),
                                 P["trans_pw.w"], P["trans_pw.b"]))
    gelu_one = float(T.gelu(np.array(1.0)))
    np.testing.assert_allclose(safg(P, e, d), gelu_one * (translated + e), atol=1e-12)


def test_zero_inputs_give_zero():
    store, P = fresh(init_safg, 4, scale=0.5)
    zero_biases(store)
    z = np.zeros((1, 4, 4, 4))
    np.testing.assert_array_equal(safg(P, z, z), 0.0)


def test_gate_is_one_map_per_image_with_nonnegative_preactivation():
    _, P = fresh(init_safg, 4, scale=1.0)
    rng = np.random.default_rng(6)
    gate, _ = safg_gate_vjp(P, rng.standard_normal((2, 4, 6, 6)), rng.standard_normal((2, 4, 6, 6)))
    assert gate.shape == (2, 1, 6, 6)
    # N * softmax is nonnegative, and GELU on [0, inf) is nonnegative and monotone
    assert np.all(gate >= 0.0)
    # the softmax sums to one, so at least one site has N * softmax >= 1
    gelu_one = float(T.gelu(np.array(1.0)))
    assert np.all(gate.max(axis=(1, 2, 3)) >= gelu_one - 1e-12)


def test_spatial_mismatch_tells_caller_to_upsample():
    _, P = fresh(init_safg, 4)
    with pytest.raises(T.ShapeError, match="upsample"):
        safg(P, np.zeros((1, 4, 8, 8)), np.zeros((1, 4, 4, 4)))


def test_blob_probe_gate_learns_blob_sites():
    """One gradient step toward a blob-only target raises the gate on the blob."""
    store, P = fresh(init_safg, 4, seed=7)
    P["psi.w"][...] = 0.0
    skip = np.zeros((1, 4, 8, 8))
    blob = np.zeros((8, 8), dtype=bool)
    blob[2:5, 3:6] = True
    skip[:, :, blob] = 3.0
    dec = np.zeros_like(skip)
    target = skip.copy()

    out, back = safg_vjp(P, skip, dec)
    store.zero_grad()
    back(2.0 * (out - target))
    for name, p in store.params.items():
        p -= 0.5 * store.grads[name]

    gate, _ = safg_gate_vjp(P, skip, dec)
    g = gate[0, 0]
    assert g[blob].min() > g[~blob].max()
