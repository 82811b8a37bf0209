"""Encoder-side branch fusion (CCTFA) and decoder-side skip gating (SAFG).

CCTFA parameter names: ``w1``, ``w2`` (1x1 query/key maps of the channel
attention), ``p1a``/``p1b`` (3x3 conv stack of the denoising pathway),
``p2`` (1x1 fusion of the mean/max descriptor planes) and ``fuse``.

SAFG parameter names: ``gate_e``, ``gate_d`` (1x1 maps of skip and decoder
features), ``psi`` (collapse to the single gate plane), ``trans_dw`` and
``trans_pw`` (spatial translation stack).
"""

from __future__ import annotations

from . import layers as L
from . import tensor as T
from .params import Scope, init_conv, init_dwconv


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise T.ShapeError(f"{what}: shapes differ, {a.shape} vs {b.shape}")


def cross_channel_attention_vjp(P: Scope, t_out, c_out):
    """softmax_C(t W1 * c W2) scaled per channel by the pooled transformer features."""
    _same_shape(t_out, c_out, "cross_channel_attention")
    q, q_back = L.conv(P, "w1", t_out)
    k, k_back = L.conv(P, "w2", c_out)
    f, f_back = T.softmax_vjp(q * k, axis=1)
    v, v_back = T.global_avg_pool_vjp(t_out)
    out = f * v

    def back(g):
        (gs,) = f_back(g * v)
        (gt_pool,) = v_back((g * f).sum(axis=(2, 3), keepdims=True))
        return q_back(gs * k) + gt_pool, k_back(gs * q)

    return out, back


def cross_channel_attention(P: Scope, t_out, c_out):
    return cross_channel_attention_vjp(P, t_out, c_out)[0]


def spatial_attention_vjp(P: Scope, c_out):
    """Denoising conv stack G times the pooled descriptor H, one plane per site."""
    C = c_out.shape[1]
    h1, b1 = L.conv(P, "p1a", c_out, padding=1)
    a1, b2 = T.gelu_vjp(h1)
    g_map, b3 = L.conv(P, "p1b", a1, padding=1)
    pooled, b4 = T.channel_pool_vjp(c_out)
    h_map, b5 = L.conv(P, "p2", pooled)
    prod = g_map * h_map
    out = prod.repeat(C, axis=1)

    def back(g):
        gp = g.sum(axis=1, keepdims=True)
        gc1 = b1(b2(b3(gp * h_map))[0])
        (gc2,) = b4(b5(gp * g_map))
        return gc1 + gc2

    return out, back


def spatial_attention(P: Scope, c_out):
    return spatial_attention_vjp(P, c_out)[0]


def cctfa_vjp(P: Scope, t_out, c_out):
    _same_shape(t_out, c_out, "cctfa")
    ca, ca_back = cross_channel_attention_vjp(P, t_out, c_out)
    sa, sa_back = spatial_attention_vjp(P, c_out)
    out, fuse_back = L.conv(P, "fuse", ca + sa)

    def back(g):
        gs = fuse_back(g)
        gt, gc = ca_back(gs)
        return gt, gc + sa_back(gs)

    return out, back


def cctfa(P: Scope, t_out, c_out):
    return cctfa_vjp(P, t_out, c_out)[0]


def safg_gate_vjp(P: Scope, skip, dec):
    """g' = GELU(N * softmax over the N sites of psi(W_e skip + W_d dec))."""
    fe, fe_back = L.conv(P, "gate_e", skip)
    fd, fd_back = L.conv(P, "gate_d", dec)
    logits, psi_back = L.conv(P, "psi", fe + fd)
    B, _, H, W = logits.shape
    n = H * W
    sm, sm_back = T.softmax_vjp(logits.reshape(B, n), axis=-1)
    gate, gelu_back = T.gelu_vjp(sm.reshape(B, 1, H, W) * n)

    def back(g):
        (gs,) = gelu_back(g)
        (gl,) = sm_back(gs.reshape(B, n) * n)
        gf = psi_back(gl.reshape(B, 1, H, W))
        return fe_back(gf), fd_back(gf)

    return gate, back


def safg_vjp(P: Scope, skip, dec):
    """D = g' * (translate(dec) + skip)."""
    if skip.shape[2:] != dec.shape[2:]:
        raise T.ShapeError(
            f"SAFG: skip is {skip.shape[2]}x{skip.shape[3]} but decoder features are "
            f"{dec.shape[2]}x{dec.shape[3]}; upsample the decoder features before gating")
    _same_shape(skip, dec, "safg")
    gate, gate_back = safg_gate_vjp(P, skip, dec)
    t1, b1 = L.dwconv(P, "trans_dw", dec, padding=1)
    t2, b2 = L.conv(P, "trans_pw", t1)
    tr, b3 = T.gelu_vjp(t2)
    mix = tr + skip
    out = gate * mix

    def back(g):
        gmix = g * gate
        gs_gate, gd_gate = gate_back((g * mix).sum(axis=1, keepdims=True))
        gd = b1(b2(b3(gmix)[0]))
        return gmix + gs_gate, gd + gd_gate

    return out, back


def safg(P: Scope, skip, dec):
    return safg_vjp(P, skip, dec)[0]


# ---------------------------------------------------------------- init

def init_cctfa(P: Scope, rng, dim: int):
    init_conv(P, rng, "w1", dim, dim, 1)
    init_conv(P, rng, "w2", dim, dim, 1)
    init_conv(P, rng, "p1a", max(dim // 2, 1), dim, 3)
    init_conv(P, rng, "p1b", 1, max(dim // 2, 1), 3)
    init_conv(P, rng, "p2", 1, 2, 1)
    init_conv(P, rng, "fuse", dim, dim, 1)


def init_safg(P: Scope, rng, dim: int):
    init_conv(P, rng, "gate_e", dim, dim, 1)
    init_conv(P, rng, "gate_d", dim, dim, 1)
    init_conv(P, rng, "psi", 1, dim, 1)
    init_dwconv(P, rng, "trans_dw", dim, 3)
    init_conv(P, rng, "trans_pw", dim, dim, 1)
