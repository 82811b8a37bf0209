"""Dense tensor primitives with hand-written reverse-mode pullbacks.

Tensors are plain ``numpy.ndarray`` objects. Image-like tensors use the
batch-channel-height-width layout throughout; images arriving as H x W x C are
transposed once at the I/O boundary.

Every differentiable primitive ``op`` has a companion ``op_vjp`` returning
``(output, pullback)``. The pullback maps the output cotangent to a tuple of
input cotangents in argument order (``None`` for an absent bias). Blocks are
built by composing these pairs explicitly; there is no global tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

Tensor = np.ndarray
Pullback = Callable[[Tensor], tuple]

PAD_MODES = ("zeros", "circular", "reflect")
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class UninitializedStatsError(RuntimeError):
    pass


class UnsupportedPrimitiveError(KeyError):
    pass


def check_tensor(x: Tensor) -> Tensor:
    """Validate the Tensor invariants: rank 1..4, positive extents, finite values."""
    if not isinstance(x, np.ndarray):
        raise TypeError(f"expected ndarray, got {type(x).__name__}")
    if x.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {x.dtype}")
    if not 1 <= x.ndim <= 4:
        raise ShapeError(f"rank {x.ndim} outside 1..4")
    if any(n < 1 for n in x.shape):
        raise ShapeError(f"non-positive extent in shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("tensor contains non-finite values")
    return x


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- padding

def _pad_matrix(n: int, p: int, mode: str, dtype) -> Tensor:
    np_mode = {"circular": "wrap", "reflect": "reflect"}[mode]
    src = np.pad(np.arange(n), p, mode=np_mode)
    m = np.zeros((n + 2 * p, n), dtype=dtype)
    m[np.arange(n + 2 * p), src] = 1
    return m


def pad2d_vjp(x: Tensor, p: int, mode: str = "zeros"):
    if mode not in PAD_MODES:
        raise ValueError(f"padding mode must be one of {PAD_MODES}, got {mode!r}")
    if p == 0:
        return x, lambda g: (g,)
    H, W = x.shape[-2:]
    if mode == "zeros":
        xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)])

        def pullback(g):
            return (np.ascontiguousarray(g[..., p:p + H, p:p + W]),)

        return xp, pullback
    if mode == "reflect" and p >= min(H, W):
        raise ShapeError(f"reflect padding {p} needs spatial extent > {p}, got {H}x{W}")
    ph = _pad_matrix(H, p, mode, x.dtype)
    pw = _pad_matrix(W, p, mode, x.dtype)
    xp = ph @ x @ pw.T

    def pullback(g):
        return (ph.T @ g @ pw,)

    return xp, pullback


# ---------------------------------------------------------------- convolutions

def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d_vjp(x, w, b=None, stride=1, padding=0, pad_mode="zeros"):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    B, I, H, W = x.shape
    O, I_w, kh, kw = w.shape
    if I != I_w:
        raise ShapeError(f"conv2d: input channel dim is {I} but weight expects {I_w}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({O},)")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    Ho, Wo = _out_extent(H, kh, stride, padding), _out_extent(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")

    if kh == kw == 1 and stride == 1 and padding == 0:
        wm = w.reshape(O, I)
        xf = x.reshape(B, I, H * W)
        out = (wm @ xf).reshape(B, O, H, W)
        if b is not None:
            out += b[:, None, None]

        def pullback(g):
            gf = g.reshape(B, O, H * W)
            gx = (wm.T @ gf).reshape(x.shape)
            gw = np.einsum("bop,bip->oi", gf, xf).reshape(w.shape)
            gb = g.sum(axis=(0, 2, 3)) if b is not None else None
            return gx, gw, gb

        return out, pullback

    xp, pad_back = pad2d_vjp(x, padding, pad_mode)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, I * kh * kw)
    wm = w.reshape(O, I * kh * kw)
    out = (cols @ wm.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[:, None, None]
    out = np.ascontiguousarray(out)

    def pullback(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wm).reshape(B, Ho, Wo, I, kh, kw)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * (Ho - 1) + 1 : stride,
                    j : j + stride * (Wo - 1) + 1 : stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        (gx,) = pad_back(gxp)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    return out, pullback


def conv2d(x, w, b=None, stride=1, padding=0, pad_mode="zeros"):
    return conv2d_vjp(x, w, b, stride, padding, pad_mode)[0]


def depthwise_conv2d_vjp(x, w, b=None, stride=1, padding=0, pad_mode="zeros"):
    B, C, H, W = x.shape
    if w.ndim != 4 or w.shape[1] != 1:
        raise ShapeError(f"depthwise weight must be C x 1 x k x k, got {w.shape}")
    if w.shape[0] != C:
        raise ShapeError(f"depthwise_conv2d: input has {C} channels, weight has {w.shape[0]}")
    kh, kw = w.shape[2:]
    Ho, Wo = _out_extent(H, kh, stride, padding), _out_extent(W, kw, stride, padding)
    xp, pad_back = pad2d_vjp(x, padding, pad_mode)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + hs : stride, j : j + ws : stride] * w[:, 0, i, j][:, None, None]
    if b is not None:
        out += b[:, None, None]

    def pullback(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        gw = np.empty_like(w)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + hs, stride), slice(j, j + ws, stride))
                gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[sl])
                gxp[sl] += g * w[:, 0, i, j][:, None, None]
        (gx,) = pad_back(gxp)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    return out, pullback


def depthwise_conv2d(x, w, b=None, stride=1, padding=0, pad_mode="zeros"):
    return depthwise_conv2d_vjp(x, w, b, stride, padding, pad_mode)[0]


def transposed_conv2d_vjp(x, w, b=None, stride=1):
    """Weight layout is in_channels x out_channels x k x k."""
    B, I, H, W = x.shape
    if w.ndim != 4 or w.shape[0] != I:
        raise ShapeError(f"transposed_conv2d: input has {I} channels, weight is {w.shape}")
    if stride < 1:
        raise ValueError("transposed_conv2d: stride must be >= 1")
    _, O, kh, kw = w.shape
    Ho, Wo = (H - 1) * stride + kh, (W - 1) * stride + kw
    hs, ws = stride * (H - 1) + 1, stride * (W - 1) + 1
    xt = x.transpose(0, 2, 3, 1).reshape(B * H * W, I)
    # per-tap products, (BHW, O, kh, kw)
    taps = (xt @ w.reshape(I, O * kh * kw)).reshape(B, H, W, O, kh, kw)
    out = np.zeros((B, O, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + hs : stride, j : j + ws : stride] += taps[..., i, j].transpose(0, 3, 1, 2)
    if b is not None:
        out += b[:, None, None]

    def pullback(g):
        gtaps = np.empty((B, H, W, O, kh, kw), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gtaps[..., i, j] = g[:, :, i : i + hs : stride, j : j + ws : stride].transpose(0, 2, 3, 1)
        gt = gtaps.reshape(B * H * W, O * kh * kw)
        gx = (gt @ w.reshape(I, O * kh * kw).T).reshape(B, H, W, I).transpose(0, 3, 1, 2)
        gw = (xt.T @ gt).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(gx), gw, gb

    return out, pullback


def transposed_conv2d(x, w, b=None, stride=1):
    return transposed_conv2d_vjp(x, w, b, stride)[0]


# ---------------------------------------------------------------- normalization

def _affine_shape(ndim: int, axis: int) -> list:
    shape = [1] * ndim
    shape[axis] = -1
    return shape


def layer_norm_vjp(x, gamma, beta, eps=1e-6, axis=1):
    """Normalize over ``axis`` independently at every other index."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    axis = axis % x.ndim
    C = x.shape[axis]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: affine shape must be ({C},), got {gamma.shape}/{beta.shape}")
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    ga = gamma.reshape(_affine_shape(x.ndim, axis))
    out = xhat * ga + beta.reshape(_affine_shape(x.ndim, axis))
    other = tuple(a for a in range(x.ndim) if a != axis)

    def pullback(g):
        gxhat = g * ga
        gx = inv * (gxhat - gxhat.mean(axis=axis, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True))
        return gx, (g * xhat).sum(axis=other), g.sum(axis=other)

    return out, pullback


def layer_norm(x, gamma, beta, eps=1e-6, axis=1):
    return layer_norm_vjp(x, gamma, beta, eps, axis)[0]


@dataclass(frozen=True)
class RunningStats:
    mean: Tensor
    var: Tensor
    count: int = 0


def batch_norm_vjp(x, gamma, beta, stats: RunningStats | None, training: bool,
                   eps: float = 1e-5, momentum: float = 0.1):
    """Per-channel batch normalization over (batch, height, width).

    Returns ``(out, pullback, new_stats)``. In training mode the running
    statistics are updated by an exponential moving average (unbiased batch
    variance); the input ``stats`` object is never mutated.
    """
    C = x.shape[1]
    ga = gamma[None, :, None, None]
    axes = (0, 2, 3)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * ga + beta[None, :, None, None]
        unbiased = var.reshape(C) * (m / max(m - 1, 1))
        if stats is None or stats.count == 0:
            prev_mean, prev_var, count = np.zeros(C, x.dtype), np.ones(C, x.dtype), 0
        else:
            prev_mean, prev_var, count = stats.mean, stats.var, stats.count
        new_stats = RunningStats(
            ((1 - momentum) * prev_mean + momentum * mu.reshape(C)).astype(x.dtype),
            ((1 - momentum) * prev_var + momentum * unbiased).astype(x.dtype),
            count + 1,
        )

        def pullback(g):
            gxhat = g * ga
            gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return out, pullback, new_stats

    if stats is None or stats.count == 0:
        raise UninitializedStatsError(
            "batch_norm in eval mode needs running statistics; run at least one training step first")
    inv = (1.0 / np.sqrt(stats.var + eps))[None, :, None, None]
    xhat = (x - stats.mean[None, :, None, None]) * inv
    out = xhat * ga + beta[None, :, None, None]

    def pullback(g):
        return g * ga * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return out, pullback, stats


def batch_norm(x, gamma, beta, stats, training, eps=1e-5, momentum=0.1):
    out, _, new_stats = batch_norm_vjp(x, gamma, beta, stats, training, eps, momentum)
    return out, new_stats


# ---------------------------------------------------------------- elementwise

def gelu_vjp(x):
    """Exact GELU, x * Phi(x) with the erf-based normal CDF."""
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf

    def pullback(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return out, pullback


def gelu(x):
    return gelu_vjp(x)[0]


def sigmoid_vjp(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def pullback(g):
        return (g * out * (1.0 - out),)

    return out, pullback


def sigmoid(x):
    return sigmoid_vjp(x)[0]


def softmax_vjp(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def pullback(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return out, pullback


def softmax(x, axis=-1):
    return softmax_vjp(x, axis)[0]


def add_vjp(a, b):
    out = a + b
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def add(a, b):
    return a + b


def mul_vjp(a, b):
    out = a * b
    return out, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def mul(a, b):
    return a * b


def matmul_vjp(a, b):
    out = a @ b

    def pullback(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, pullback


def matmul(a, b):
    return a @ b


def linear_vjp(x, w, b=None):
    """Affine map over the last axis: x (..., n_in) @ w (n_in, n_out) + b."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: feature dim {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.reshape(-1, w.shape[0])
    out = x2 @ w
    if b is not None:
        out += b
    out = out.reshape(*lead, w.shape[1])

    def pullback(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.T).reshape(x.shape)
        return gx, x2.T @ g2, (g2.sum(axis=0) if b is not None else None)

    return out, pullback


def linear(x, w, b=None):
    return linear_vjp(x, w, b)[0]


def concat_vjp(xs: Sequence[Tensor], axis=1):
    out = np.concatenate(xs, axis=axis)
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def pullback(g):
        return tuple(np.split(g, cuts, axis=axis))

    return out, pullback


def concat(xs, axis=1):
    return np.concatenate(xs, axis=axis)


def reshape_vjp(x, shape):
    out = x.reshape(shape)
    return out, lambda g: (g.reshape(x.shape),)


def reshape(x, shape):
    return x.reshape(shape)


def transpose_vjp(x, axes):
    inv = np.argsort(axes)
    return x.transpose(axes), lambda g: (g.transpose(inv),)


# ---------------------------------------------------------------- pooling / resampling

def global_avg_pool_vjp(x):
    B, C, H, W = x.shape
    out = x.mean(axis=(2, 3), keepdims=True)

    def pullback(g):
        return (np.broadcast_to(g / (H * W), x.shape).copy(),)

    return out, pullback


def global_avg_pool(x):
    return global_avg_pool_vjp(x)[0]


def channel_pool_vjp(x):
    """Plane 0 is the per-site channel mean, plane 1 the per-site channel max."""
    C = x.shape[1]
    idx = x.argmax(axis=1)[:, None]
    mx = np.take_along_axis(x, idx, axis=1)
    out = np.concatenate([x.mean(axis=1, keepdims=True), mx], axis=1)

    def pullback(g):
        gx = np.broadcast_to(g[:, :1] / C, x.shape).copy()
        sel = np.take_along_axis(gx, idx, axis=1) + g[:, 1:]
        np.put_along_axis(gx, idx, sel, axis=1)
        return (gx,)

    return out, pullback


def channel_pool(x):
    return channel_pool_vjp(x)[0]


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> Tensor:
    """Row-stochastic 1-d linear interpolation matrix, align-corners=False."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def bilinear_upsample_vjp(x, out_h, out_w):
    H, W = x.shape[-2:]
    if out_h < H or out_w < W:
        raise ShapeError(f"bilinear_upsample: target {out_h}x{out_w} smaller than input {H}x{W}")
    ah = interp_matrix(H, out_h, x.dtype)
    aw = interp_matrix(W, out_w, x.dtype)
    out = ah @ x @ aw.T

    def pullback(g):
        return (ah.T @ g @ aw,)

    return out, pullback


def bilinear_upsample(x, out_h, out_w):
    return bilinear_upsample_vjp(x, out_h, out_w)[0]


# ---------------------------------------------------------------- registry

def _batch_norm_registry(x, gamma, beta, stats=None, training=True, eps=1e-5, momentum=0.1):
    out, pullback, _ = batch_norm_vjp(x, gamma, beta, stats, training, eps, momentum)
    return out, pullback


def _concat_registry(*xs, axis=1):
    return concat_vjp(xs, axis)


VJP_REGISTRY: dict[str, Callable] = {
    "pad2d": pad2d_vjp,
    "conv2d": conv2d_vjp,
    "depthwise_conv2d": depthwise_conv2d_vjp,
    "transposed_conv2d": transposed_conv2d_vjp,
    "layer_norm": layer_norm_vjp,
    "batch_norm": _batch_norm_registry,
    "gelu": gelu_vjp,
    "sigmoid": sigmoid_vjp,
    "softmax": softmax_vjp,
    "global_avg_pool": global_avg_pool_vjp,
    "channel_pool": channel_pool_vjp,
    "bilinear_upsample": bilinear_upsample_vjp,
    "matmul": matmul_vjp,
    "linear": linear_vjp,
    "concat": _concat_registry,
    "add": add_vjp,
    "mul": mul_vjp,
    "reshape": reshape_vjp,
    "transpose": transpose_vjp,
}


def vjp_of(primitive: str, inputs: Sequence, cotangent: Tensor, **kwargs) -> tuple:
    """Input cotangents of ``primitive`` evaluated at ``inputs``."""
    try:
        fn = VJP_REGISTRY[primitive]
    except KeyError:
        raise UnsupportedPrimitiveError(
            f"no pullback registered for {primitive!r}; known: {sorted(VJP_REGISTRY)}") from None
    _, pullback = fn(*inputs, **kwargs)
    return pullback(cotangent)
