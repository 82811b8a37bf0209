"""Context-addition self-attention, the depthwise FCN and the CAT block.

Token tensors are ``(B, N, C)`` with ``N = h * w`` in row-major grid order.
Parameter names inside a CAT block scope::

    attn.q / attn.k / attn.v      query/key/value projections (C -> C)
    attn.cap1 / attn.cap2         key-enrichment mixers (2C -> C -> C)
    attn.sr                       spatial reduction (R*C -> C), only if R > 1
    attn.o                        head-merge projection (C -> C)
    attn.proj                     trailing linear layer (C -> C)
    ffn.norm, ffn.pw1, ffn.dw, ffn.pw2   depthwise FCN
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .params import Scope, init_conv, init_dwconv, init_linear, init_norm


@dataclass(frozen=True)
class CatSpec:
    dim: int
    heads: int = 1
    reduction: int = 1
    mlp_ratio: int = 4
    pad_mode: str = "zeros"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"channel count {self.dim} not divisible by {self.heads} heads")
        if self.reduction < 1:
            raise ValueError("reduction ratio must be >= 1")
        if self.pad_mode not in T.PAD_MODES:
            raise ValueError(f"unknown padding mode {self.pad_mode!r}")


def reduction_factors(R: int) -> tuple[int, int]:
    """Split R into (row, col) grid factors with rows >= cols, as square as possible.

    8 -> (4, 2), 4 -> (2, 2), 2 -> (2, 1), 1 -> (1, 1).
    """
    if R < 1:
        raise ValueError("reduction ratio must be >= 1")
    rh = next(d for d in range(math.isqrt(R), R + 1) if R % d == 0 and d * d >= R)
    return rh, R // rh


def attention_macs(n_queries: int, n_keys: int, head_dim: int, heads: int = 1) -> dict:
    """Multiply-add counts of the score product and the value aggregation."""
    score = heads * n_queries * n_keys * head_dim
    return {"score": score, "aggregate": score, "total": 2 * score}


# ---------------------------------------------------------------- operations

def scaled_attention_vjp(q, k, v):
    """softmax(q k^T / sqrt(d)) v over the key axis; leading axes are batch."""
    if q.shape[-1] != k.shape[-1]:
        raise T.ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scale = 1.0 / math.sqrt(q.shape[-1])
    s, s_back = T.matmul_vjp(q, np.swapaxes(k, -1, -2))
    a, a_back = T.softmax_vjp(s * scale, axis=-1)
    out, o_back = T.matmul_vjp(a, v)

    def back(g):
        ga, gv = o_back(g)
        (gs,) = a_back(ga)
        gq, gkt = s_back(gs * scale)
        return gq, np.swapaxes(gkt, -1, -2), gv

    return out, back


def scaled_attention(q, k, v):
    return scaled_attention_vjp(q, k, v)[0]


def attention_weights(q, k):
    scale = 1.0 / math.sqrt(q.shape[-1])
    return T.softmax(q @ np.swapaxes(k, -1, -2) * scale, axis=-1)


def cap_enrich_vjp(P: Scope, k, q):
    """K' = GELU([K, Q] W1) W2 + K over token features."""
    if k.shape != q.shape:
        raise T.ShapeError(f"key shape {k.shape} != query shape {q.shape}")
    cat, cat_back = T.concat_vjp([k, q], axis=-1)
    h, h_back = L.linear(P, "cap1", cat)
    a, a_back = T.gelu_vjp(h)
    m, m_back = L.linear(P, "cap2", a)

    def back(g):
        gk_cat, gq = cat_back(h_back(a_back(m_back(g))[0]))
        return gk_cat + g, gq

    return m + k, back


def cap_enrich(P: Scope, k, q):
    return cap_enrich_vjp(P, k, q)[0]


def spatial_reduce_vjp(P: Scope, x, hw: tuple[int, int], R: int):
    """Fold each rh x rw block of tokens into one token, then map R*C -> C."""
    if R == 1:
        return x, lambda g: g
    B, N, C = x.shape
    h, w = hw
    if h * w != N:
        raise T.ShapeError(f"token count {N} != grid {h}x{w}")
    rh, rw = reduction_factors(R)
    if h % rh or w % rw:
        ph, pw = (-h) % rh, (-w) % rw
        raise T.ShapeError(
            f"token grid {h}x{w} not divisible by reduction blocks {rh}x{rw}; "
            f"pad the grid by ({ph}, {pw}) or pick an input size divisible by 32")
    shape6 = (B, h // rh, rh, w // rw, rw, C)
    folded = x.reshape(shape6).transpose(0, 1, 3, 2, 4, 5).reshape(B, N // R, R * C)
    out, lin_back = L.linear(P, "sr", folded)

    def back(g):
        gf = lin_back(g).reshape(B, h // rh, w // rw, rh, rw, C)
        return gf.transpose(0, 1, 3, 2, 4, 5).reshape(B, N, C)

    return out, back


def spatial_reduce(P: Scope, x, hw, R):
    return spatial_reduce_vjp(P, x, hw, R)[0]


def _split_heads(x, M):
    B, N, C = x.shape
    return x.reshape(B, N, M, C // M).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, M, N, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, M * d)


def context_addition_attention_vjp(P: Scope, x, heads: int, R: int):
    B, C, h, w = x.shape
    if C % heads:
        raise ValueError(f"channel count {C} not divisible by {heads} heads")
    N = h * w
    tok = x.reshape(B, C, N).transpose(0, 2, 1)
    q, q_back = L.linear(P, "q", tok)
    k, k_back = L.linear(P, "k", tok)
    v, v_back = L.linear(P, "v", tok)
    k1, cap_back = cap_enrich_vjp(P, k, q)
    kr, kr_back = spatial_reduce_vjp(P, k1, (h, w), R)
    vr, vr_back = spatial_reduce_vjp(P, v, (h, w), R)
    o, att_back = scaled_attention_vjp(_split_heads(q, heads), _split_heads(kr, heads),
                                       _split_heads(vr, heads))
    o2, o_back = L.linear(P, "o", _merge_heads(o))
    z, proj_back = L.linear(P, "proj", o2)
    out = z.transpose(0, 2, 1).reshape(B, C, h, w)

    def back(g):
        gz = g.reshape(B, C, N).transpose(0, 2, 1)
        go = _split_heads(o_back(proj_back(gz)), heads)
        gq, gkr, gvr = att_back(go)
        gk1 = kr_back(_merge_heads(gkr))
        gv = vr_back(_merge_heads(gvr))
        gk, gq_cap = cap_back(gk1)
        gq = _merge_heads(gq) + gq_cap
        gtok = q_back(gq) + k_back(gk) + v_back(gv)
        return gtok.transpose(0, 2, 1).reshape(B, C, h, w)

    return out, back


def context_addition_attention(P: Scope, x, heads: int, R: int):
    return context_addition_attention_vjp(P, x, heads, R)[0]


def d_fcn_vjp(P: Scope, z, t_in, pad_mode="zeros"):
    """GELU(dw3x3(pw1(LN(z + t_in)))) followed by pw2; padding mode is switchable."""
    if z.shape != t_in.shape:
        raise T.ShapeError(f"d_fcn: attention output {z.shape} != merge output {t_in.shape}")
    n, n_back = L.layer_norm(P, "norm", z + t_in, axis=1)
    h1, h1_back = L.conv(P, "pw1", n)
    h2, h2_back = L.dwconv(P, "dw", h1, padding=1, pad_mode=pad_mode)
    a, a_back = T.gelu_vjp(h2)
    out, out_back = L.conv(P, "pw2", a)

    def back(g):
        gu = n_back(h1_back(h2_back(a_back(out_back(g))[0])))
        return gu, gu

    return out, back


def d_fcn(P: Scope, z, t_in, pad_mode="zeros"):
    return d_fcn_vjp(P, z, t_in, pad_mode)[0]


def cat_block_vjp(P: Scope, x, spec: CatSpec):
    """z = attention(x); out = (z + x) + d_fcn(z, x)."""
    if x.shape[1] != spec.dim:
        raise T.ShapeError(f"CAT block expects {spec.dim} channels, got {x.shape[1]}")
    z, z_back = context_addition_attention_vjp(P.child("attn"), x, spec.heads, spec.reduction)
    f, f_back = d_fcn_vjp(P.child("ffn"), z, x, spec.pad_mode)
    out = z + x + f

    def back(g):
        gz_f, gx_f = f_back(g)
        gz = g + gz_f
        return z_back(gz) + g + gx_f

    return out, back


def cat_block(P: Scope, x, spec: CatSpec):
    return cat_block_vjp(P, x, spec)[0]


# ---------------------------------------------------------------- init

def init_attention(P: Scope, rng, dim: int, reduction: int):
    for name in ("q", "k", "v"):
        init_linear(P, rng, name, dim, dim)
    init_linear(P, rng, "cap1", 2 * dim, dim)
    init_linear(P, rng, "cap2", dim, dim)
    if reduction > 1:
        init_linear(P, rng, "sr", reduction * dim, dim)
    init_linear(P, rng, "o", dim, dim)
    init_linear(P, rng, "proj", dim, dim)


def init_d_fcn(P: Scope, rng, dim: int, mlp_ratio: int):
    hidden = mlp_ratio * dim
    init_norm(P, "norm", dim)
    init_conv(P, rng, "pw1", hidden, dim, 1)
    init_dwconv(P, rng, "dw", hidden, 3)
    init_conv(P, rng, "pw2", dim, hidden, 1)


def init_cat_block(P: Scope, rng, spec: CatSpec):
    init_attention(P.child("attn"), rng, spec.dim, spec.reduction)
    init_d_fcn(P.child("ffn"), rng, spec.dim, spec.mlp_ratio)
