"""Primitive ops: hand oracles, invariants and pullback properties."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from catfa import tensor as T

finite = st.floats(-5, 5, allow_nan=False, width=64)


def small_maps(min_side=1, max_side=5, max_c=3):
    return st.tuples(st.integers(1, 2), st.integers(1, max_c), st.integers(min_side, max_side),
                     st.integers(min_side, max_side)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite))


def conv_loop(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, [(0, 0), (0, 0), (padding, padding), (padding, padding)])
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


# ---------------------------------------------------------------- conv2d

def test_conv2d_identity_kernel():
    out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, np.ones((1, 1, 3, 3)))


def test_conv2d_stem_geometry():
    x = np.zeros((1, 3, 224, 224), dtype=np.float32)
    w = np.zeros((4, 3, 7, 7), dtype=np.float32)
    assert T.conv2d(x, w, None, stride=4, padding=3).shape == (1, 4, 56, 56)


def test_conv2d_hand_sum():
    out = T.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)), None, stride=2)
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 4.0))


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (4, 3, 7), (2, 0, 2), (1, 0, 1)])
def test_conv2d_matches_loop_oracle(stride, padding, k):
    rng = np.random.default_rng(k + stride)
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(T.conv2d(x, w, b, stride, padding), conv_loop(x, w, b, stride, padding),
                               rtol=0, atol=1e-12)


def test_conv2d_channel_mismatch_names_dimension():
    with pytest.raises(T.ShapeError, match="channel"):
        T.conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 4, 3, 3)))


def test_circular_padding_wraps():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    xp = T.pad2d_vjp(x, 1, "circular")[0]
    np.testing.assert_array_equal(xp[0, 0, 0, 1:-1], x[0, 0, -1])
    np.testing.assert_array_equal(xp[0, 0, 1:-1, 0], x[0, 0, :, -1])
    assert xp[0, 0, 0, 0] == x[0, 0, -1, -1]


def test_reflect_padding_mirrors_without_edge():
    x = np.arange(4.0).reshape(1, 1, 1, 4) + np.zeros((1, 1, 3, 1))
    xp = T.pad2d_vjp(x, 2, "reflect")[0]
    np.testing.assert_array_equal(xp[0, 0, 2], [2, 1, 0, 1, 2, 3, 2, 1])


# ---------------------------------------------------------------- depthwise / transposed

def test_depthwise_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 5))
    w = np.zeros((3, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(T.depthwise_conv2d(x, w, None, padding=1), x)


def test_depthwise_zero_kernel_gives_bias():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 1, 3, 3))
    w[0] = 0.0
    out = T.depthwise_conv2d(x, w, np.array([0.7, 0.0]), padding=1)
    np.testing.assert_array_equal(out[0, 0], np.full((4, 4), 0.7))


def test_depthwise_equals_block_diagonal_conv():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((2, 1, 7, 7))
    full = np.zeros((2, 2, 7, 7))
    full[0, 0], full[1, 1] = w[0, 0], w[1, 0]
    np.testing.assert_allclose(T.depthwise_conv2d(x, w, None, padding=3),
                               T.conv2d(x, full, None, padding=3), rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(small_maps(min_side=3), st.integers(0, 2 ** 31))
def test_depthwise_equals_block_diagonal_conv_random(x, seed):
    C = x.shape[1]
    w = np.random.default_rng(seed).standard_normal((C, 1, 3, 3))
    full = np.zeros((C, C, 3, 3))
    for c in range(C):
        full[c, c] = w[c, 0]
    np.testing.assert_allclose(T.depthwise_conv2d(x, w, None, padding=1),
                               T.conv2d(x, full, None, padding=1), rtol=1e-12, atol=1e-12)


def test_depthwise_channel_mismatch():
    with pytest.raises(T.ShapeError):
        T.depthwise_conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 1, 3, 3)))


def test_transposed_conv_single_pixel():
    out = T.transposed_conv2d(np.ones((1, 1, 1, 1)), np.ones((1, 1, 2, 2)), None, stride=2)
    np.testing.assert_array_equal(out, np.ones((1, 1, 2, 2)))


def test_transposed_conv_size_formula():
    out = T.transposed_conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), None, stride=2)
    assert out.shape == (1, 1, 4, 4)


@pytest.mark.parametrize("stride,k", [(2, 2), (2, 3), (1, 3), (3, 2)])
def test_transposed_conv_zero_insertion_oracle(stride, k):
    rng = np.random.default_rng(stride * 10 + k)
    x = rng.standard_normal((2, 3, 3, 4))
    w = rng.standard_normal((3, 2, k, k))  # in x out x k x k
    b = rng.standard_normal(2)
    B, I, H, W = x.shape
    dil = np.zeros((B, I, (H - 1) * stride + 1, (W - 1) * stride + 1))
    dil[:, :, ::stride, ::stride] = x
    flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    oracle = T.conv2d(dil, np.ascontiguousarray(flipped), b, padding=k - 1)
    np.testing.assert_allclose(T.transposed_conv2d(x, w, b, stride), oracle, rtol=0, atol=1e-12)


def test_transposed_conv_is_adjoint_of_conv():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((3, 2, 2, 2))  # conv: 2 -> 3 channels; transposed: 3 -> 2
    x = rng.standard_normal((1, 2, 6, 6))
    y = rng.standard_normal((1, 3, 3, 3))
    lhs = (T.conv2d(x, w, None, stride=2) * y).sum()
    rhs = (x * T.transposed_conv2d(y, w, None, stride=2)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


# ---------------------------------------------------------------- normalization

def test_layer_norm_constant_input_is_zero():
    out = T.layer_norm(np.full((1, 4, 2, 2), 3.0), np.ones(4), np.zeros(4))
    np.testing.assert_array_equal(out, 0.0)


def test_layer_norm_zero_gain_gives_beta():
    rng = np.random.default_rng(0)
    beta = np.array([1.0, -2.0, 0.5])
    out = T.layer_norm(rng.standard_normal((2, 3, 2, 2)), np.zeros(3), beta)
    np.testing.assert_array_equal(out, np.broadcast_to(beta[None, :, None, None], out.shape))


def test_layer_norm_two_channels_by_hand():
    x = np.array([1.0, 3.0]).reshape(1, 2, 1, 1)
    out = T.layer_norm(x, np.ones(2), np.zeros(2), eps=1e-12)
    np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.tuples(st.integers(1, 2), st.integers(2, 6), st.integers(1, 3), st.integers(1, 3)).flatmap(
    lambda s: arrays(np.float64, s, elements=finite)))
def test_layer_norm_moments(x):
    spread = x.std(axis=1).min()
    if spread < 1e-2:
        return
    C = x.shape[1]
    out = T.layer_norm(x, np.ones(C), np.zeros(C), eps=1e-12)
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)


def test_batch_norm_standardized_batch_unchanged():
    x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(4, 1, 1, 1)
    out, _, _ = T.batch_norm_vjp(x, np.ones(1), np.zeros(1), None, True, eps=1e-12)
    np.testing.assert_allclose(out, x, atol=1e-10)


def test_batch_norm_zero_gain_constant_beta():
    x = np.random.default_rng(0).standard_normal((3, 2, 2, 2))
    out = T.batch_norm(x, np.zeros(2), np.array([0.5, -1.0]), None, True)[0]
    np.testing.assert_array_equal(out[:, 0], 0.5)
    np.testing.assert_array_equal(out[:, 1], -1.0)


def test_batch_norm_two_elements_by_hand():
    x = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
    out, _, stats = T.batch_norm_vjp(x, np.ones(1), np.zeros(1), None, True, eps=1e-12)
    np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], atol=1e-10)
    assert stats.count == 1


def test_batch_norm_running_stats_update():
    x = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
    _, _, s1 = T.batch_norm_vjp(x, np.ones(1), np.zeros(1), None, True, momentum=0.1)
    _, _, s2 = T.batch_norm_vjp(x, np.ones(1), np.zeros(1), s1, True, momentum=0.1)
    # unbiased batch variance of [0, 2] is 2; EMA from (0, 1)
    np.testing.assert_allclose(s1.mean, [0.1])
    np.testing.assert_allclose(s1.var, [0.9 + 0.2])
    np.testing.assert_allclose(s2.mean, [0.19])
    assert s2.count == 2


def test_batch_norm_eval_uses_running_stats():
    stats = T.RunningStats(np.array([1.0]), np.array([4.0]), 1)
    out, _, same = T.batch_norm_vjp(np.array([5.0]).reshape(1, 1, 1, 1), np.ones(1), np.zeros(1),
                                    stats, False, eps=0.0 + 1e-12)
    np.testing.assert_allclose(out.ravel(), [2.0])
    assert same is stats


def test_batch_norm_eval_without_stats_errors():
    with pytest.raises(T.UninitializedStatsError):
        T.batch_norm(np.zeros((1, 1, 2, 2)), np.ones(1), np.zeros(1), None, False)


@settings(max_examples=30, deadline=None)
@given(st.tuples(st.integers(2, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)).flatmap(
    lambda s: arrays(np.float64, s, elements=finite)))
def test_batch_norm_moments(x):
    if x.std(axis=(0, 2, 3)).min() < 1e-2:
        return
    C = x.shape[1]
    out = T.batch_norm(x, np.ones(C), np.zeros(C), None, True, eps=1e-12)[0]
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)


# ---------------------------------------------------------------- activations

def test_gelu_values():
    assert T.gelu(np.array(0.0)) == 0.0
    assert T.gelu(np.array(1.0)) == pytest.approx(0.8413447460685429, abs=1e-12)
    np.testing.assert_allclose(T.gelu(np.array([10.0, -10.0])), [10.0, 0.0], atol=1e-12)


def test_gelu_gradient_at_zero_is_half():
    (g,) = T.vjp_of("gelu", [np.array([0.0])], np.array([1.0]))
    assert g[0] == pytest.approx(0.5, abs=1e-15)


def test_gelu_keeps_float32():
    assert T.gelu(np.ones(3, dtype=np.float32)).dtype == np.float32


def test_sigmoid_open_interval_and_symmetry():
    x = np.linspace(-30, 30, 61)
    s = T.sigmoid(x)
    assert np.all(s > 0) and np.all(s < 1)
    np.testing.assert_allclose(s + T.sigmoid(-x), 1.0, atol=1e-15)


def test_softmax_closed_forms():
    np.testing.assert_allclose(T.softmax(np.zeros(4)), 0.25)
    np.testing.assert_allclose(T.softmax(np.array([0.0, math.log(2)])), [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_large_inputs_are_stable():
    s = T.softmax(np.array([1000.0, 1000.0]))
    np.testing.assert_allclose(s, [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 6)), elements=finite),
       st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(x, c):
    s = T.softmax(x, axis=-1)
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(T.softmax(x + c, axis=-1), s, atol=1e-12)


# ---------------------------------------------------------------- pooling / resampling

def test_global_avg_pool():
    assert T.global_avg_pool(np.full((1, 1, 3, 3), 2.5)).item() == 2.5
    assert T.global_avg_pool(np.array([0.0, 0.0, 2.0, 2.0]).reshape(1, 1, 2, 2)).item() == 1.0
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    oracle = np.array([[x[b, c].sum() / 20 for c in range(3)] for b in range(2)])
    np.testing.assert_allclose(T.global_avg_pool(x)[..., 0, 0], oracle, rtol=0, atol=1e-12)


def test_channel_pool():
    x = np.random.default_rng(0).standard_normal((1, 1, 3, 3))
    out = T.channel_pool(x)
    np.testing.assert_array_equal(out[:, 0], x[:, 0])
    np.testing.assert_array_equal(out[:, 1], x[:, 0])
    two = np.array([1.0, 3.0]).reshape(1, 2, 1, 1)
    np.testing.assert_array_equal(T.channel_pool(two).ravel(), [2.0, 3.0])


def test_channel_pool_site_loop_oracle():
    x = np.random.default_rng(1).standard_normal((2, 4, 3, 3))
    out = T.channel_pool(x)
    for b in range(2):
        for i in range(3):
            for j in range(3):
                assert out[b, 0, i, j] == pytest.approx(np.mean(x[b, :, i, j]), abs=1e-15)
                assert out[b, 1, i, j] == max(x[b, :, i, j])


def test_bilinear_constant_map():
    np.testing.assert_allclose(T.bilinear_upsample(np.full((1, 1, 3, 2), 4.0), 7, 9), 4.0)


def test_bilinear_ramp_stays_linear_inside():
    x = np.arange(6.0)[None, None, None, :].repeat(2, axis=2)
    row = T.bilinear_upsample(x, 4, 12)[0, 0, 0, 1:-1]
    np.testing.assert_allclose(np.diff(row), 0.5, atol=1e-12)


def test_bilinear_hand_oracle():
    x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
    expected = np.array([[0.0, 0.25, 0.75, 1.0],
                         [0.5, 0.75, 1.25, 1.5],
                         [1.5, 1.75, 2.25, 2.5],
                         [2.0, 2.25, 2.75, 3.0]])
    np.testing.assert_allclose(T.bilinear_upsample(x, 4, 4)[0, 0], expected, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(small_maps(), st.integers(0, 3), st.integers(0, 3))
def test_bilinear_preserves_bounds(x, dh, dw):
    H, W = x.shape[-2:]
    out = T.bilinear_upsample(x, H * (dh + 1) + dh, W * (dw + 1))
    assert out.min() >= x.min() - 1e-12 and out.max() <= x.max() + 1e-12


# ---------------------------------------------------------------- pullback properties

def _random_inputs(name, rng):
    x = rng.standard_normal((2, 3, 4, 4))
    table = {
        "pad2d": ([x], {"p": 1, "mode": "circular"}),
        "conv2d": ([x, rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)], {"padding": 1}),
        "depthwise_conv2d": ([x, rng.standard_normal((3, 1, 3, 3)), None], {"padding": 1}),
        "transposed_conv2d": ([x, rng.standard_normal((3, 2, 2, 2)), None], {"stride": 2}),
        "layer_norm": ([x, rng.standard_normal(3), rng.standard_normal(3)], {}),
        "batch_norm": ([x, rng.standard_normal(3), rng.standard_normal(3)], {}),
        "gelu": ([x], {}),
        "sigmoid": ([x], {}),
        "softmax": ([x], {"axis": 1}),
        "global_avg_pool": ([x], {}),
        "channel_pool": ([x], {}),
        "bilinear_upsample": ([x], {"out_h": 8, "out_w": 6}),
        "matmul": ([x, rng.standard_normal((4, 2))], {}),
        "linear": ([x, rng.standard_normal((4, 2)), rng.standard_normal(2)], {}),
        "concat": ([x, x[:, :1]], {"axis": 1}),
        "add": ([x, rng.standard_normal((1, 3, 1, 1))], {}),
        "mul": ([x, rng.standard_normal((1, 3, 1, 1))], {}),
        "reshape": ([x], {"shape": (2, -1)}),
        "transpose": ([x], {"axes": (0, 2, 3, 1)}),
    }
    return table[name]


@pytest.mark.parametrize("name", sorted(T.VJP_REGISTRY))
def test_pullback_zero_and_linearity(name):
    rng = np.random.default_rng(0)
    inputs, kw = _random_inputs(name, rng)
    out = T.VJP_REGISTRY[name](*inputs, **kw)[0]
    zero = T.vjp_of(name, inputs, np.zeros_like(out), **kw)
    assert all(g is None or not np.any(g) for g in zero)
    g1, g2 = rng.standard_normal(out.shape), rng.standard_normal(out.shape)
    a = T.vjp_of(name, inputs, 2.0 * g1 + g2, **kw)
    b1, b2 = T.vjp_of(name, inputs, g1, **kw), T.vjp_of(name, inputs, g2, **kw)
    for ga, gb1, gb2 in zip(a, b1, b2):
        if ga is not None:
            np.testing.assert_allclose(ga, 2.0 * gb1 + gb2, rtol=1e-10, atol=1e-10)


def test_unsupported_primitive():
    with pytest.raises(T.UnsupportedPrimitiveError, match="max_pool"):
        T.vjp_of("max_pool", [np.zeros(2)], np.zeros(2))


def test_check_tensor_rejects_bad_tensors():
    with pytest.raises(T.ShapeError):
        T.check_tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(T.ShapeError):
        T.check_tensor(np.zeros((0, 2)))
    with pytest.raises(FloatingPointError):
        T.check_tensor(np.array([np.nan]))
