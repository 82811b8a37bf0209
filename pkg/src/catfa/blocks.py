"""ConvNeXt encoder block, Conv-G-NeXt decoder block and patch merging layers."""

from __future__ import annotations

from dataclasses import dataclass

from . import layers as L
from . import tensor as T
from .params import Scope, init_conv, init_dwconv, init_norm

EXPANSION = 4


def convnext_block_vjp(P: Scope, x):
    """x + pw_project(GELU(pw_expand(LN(dw7(x)))))."""
    if x.shape[1] != P["dw7.w"].shape[0]:
        raise T.ShapeError(f"ConvNeXt block built for {P['dw7.w'].shape[0]} channels, got {x.shape[1]}")
    h, b1 = L.dwconv(P, "dw7", x, padding=3)
    h, b2 = L.layer_norm(P, "norm", h, axis=1)
    h, b3 = L.conv(P, "pw_expand", h)
    h, b4 = T.gelu_vjp(h)
    h, b5 = L.conv(P, "pw_project", h)

    def back(g):
        gb = b1(b2(b3(b4(b5(g))[0])))
        return g + gb

    return x + h, back


def convnext_block(P: Scope, x):
    return convnext_block_vjp(P, x)[0]


def conv_g_next_block_vjp(P: Scope, x, training: bool):
    """GELU(x + extra_pw(pw_project(GELU(pw_expand(BN(dw7(x))))))).

    Batch norm replaces the layer norm of the ConvNeXt block, the extra 1x1
    convolution closes the residual branch, and a GELU wraps the block output.
    """
    if x.shape[1] != P["dw7.w"].shape[0]:
        raise T.ShapeError(f"Conv-G-NeXt block built for {P['dw7.w'].shape[0]} channels, got {x.shape[1]}")
    h, b1 = L.dwconv(P, "dw7", x, padding=3)
    h, b2 = L.batch_norm(P, "bn", h, training)
    h, b3 = L.conv(P, "pw_expand", h)
    h, b4 = T.gelu_vjp(h)
    h, b5 = L.conv(P, "pw_project", h)
    h, b6 = L.conv(P, "extra_pw", h)
    out, b7 = T.gelu_vjp(x + h)

    def back(g):
        (gs,) = b7(g)
        gb = b1(b2(b3(b4(b5(b6(gs)))[0])))
        return gs + gb

    return out, back


def conv_g_next_block(P: Scope, x, training: bool = False):
    return conv_g_next_block_vjp(P, x, training)[0]


@dataclass(frozen=True)
class MergeSpec:
    """Strided-conv downsampling; ``overlap`` merges need stride < kernel."""

    kind: str
    c_in: int
    c_out: int
    k: int
    stride: int
    norm_first: bool = False

    def __post_init__(self):
        if self.kind == "overlap" and not self.stride < self.k:
            raise ValueError(f"overlap merge needs stride < kernel, got S={self.stride}, k={self.k}")
        if self.kind == "nonoverlap" and self.stride != self.k:
            raise ValueError(f"non-overlapping merge needs stride == kernel, got S={self.stride}, k={self.k}")
        if self.kind not in ("overlap", "nonoverlap"):
            raise ValueError(f"unknown merge kind {self.kind!r}")

    @property
    def padding(self) -> int:
        return self.k // 2 if self.kind == "overlap" else 0


def patch_merge_vjp(P: Scope, x, spec: MergeSpec):
    H, W = x.shape[2:]
    if H % spec.stride or W % spec.stride:
        raise T.ShapeError(
            f"patch merge with stride {spec.stride} needs spatial extent divisible by it, got {H}x{W}")
    if spec.norm_first:
        h, b1 = L.layer_norm(P, "norm", x, axis=1)
        out, b2 = L.conv(P, "conv", h, spec.stride, spec.padding)
    else:
        h, b1 = L.conv(P, "conv", x, spec.stride, spec.padding)
        out, b2 = L.layer_norm(P, "norm", h, axis=1)
    return out, L.chain(b1, b2)


def patch_merge(P: Scope, x, spec: MergeSpec):
    return patch_merge_vjp(P, x, spec)[0]


# ---------------------------------------------------------------- init

def init_convnext_block(P: Scope, rng, dim: int):
    init_dwconv(P, rng, "dw7", dim, 7)
    init_norm(P, "norm", dim)
    init_conv(P, rng, "pw_expand", EXPANSION * dim, dim, 1)
    init_conv(P, rng, "pw_project", dim, EXPANSION * dim, 1)


def init_conv_g_next_block(P: Scope, rng, dim: int):
    init_dwconv(P, rng, "dw7", dim, 7)
    init_norm(P, "bn", dim)
    init_conv(P, rng, "pw_expand", EXPANSION * dim, dim, 1)
    init_conv(P, rng, "pw_project", dim, EXPANSION * dim, 1)
    init_conv(P, rng, "extra_pw", dim, dim, 1)


def init_patch_merge(P: Scope, rng, spec: MergeSpec):
    init_conv(P, rng, "conv", spec.c_out, spec.c_in, spec.k)
    init_norm(P, "norm", spec.c_in if spec.norm_first else spec.c_out)
