"""Parameterised wrappers around tensor primitives.

Each helper reads its weights from a :class:`~catfa.params.Scope`, runs the
primitive, and returns ``(out, back)`` where ``back(g)`` accumulates the
parameter gradients into the scope and returns the input cotangent.
"""

from __future__ import annotations

from . import tensor as T
from .params import Scope


def _bias(P: Scope, name: str):
    key = f"{name}.b"
    return P[key] if key in P else None


def conv(P: Scope, name: str, x, stride=1, padding=0, pad_mode="zeros"):
    out, pb = T.conv2d_vjp(x, P[f"{name}.w"], _bias(P, name), stride, padding, pad_mode)

    def back(g):
        gx, gw, gb = pb(g)
        P.accumulate(f"{name}.w", gw)
        P.accumulate(f"{name}.b", gb)
        return gx

    return out, back


def dwconv(P: Scope, name: str, x, padding, pad_mode="zeros"):
    out, pb = T.depthwise_conv2d_vjp(x, P[f"{name}.w"], _bias(P, name), 1, padding, pad_mode)

    def back(g):
        gx, gw, gb = pb(g)
        P.accumulate(f"{name}.w", gw)
        P.accumulate(f"{name}.b", gb)
        return gx

    return out, back


def tconv(P: Scope, name: str, x, stride):
    out, pb = T.transposed_conv2d_vjp(x, P[f"{name}.w"], _bias(P, name), stride)

    def back(g):
        gx, gw, gb = pb(g)
        P.accumulate(f"{name}.w", gw)
        P.accumulate(f"{name}.b", gb)
        return gx

    return out, back


def linear(P: Scope, name: str, x):
    out, pb = T.linear_vjp(x, P[f"{name}.w"], _bias(P, name))

    def back(g):
        gx, gw, gb = pb(g)
        P.accumulate(f"{name}.w", gw)
        P.accumulate(f"{name}.b", gb)
        return gx

    return out, back


def layer_norm(P: Scope, name: str, x, axis=1, eps=1e-6):
    out, pb = T.layer_norm_vjp(x, P[f"{name}.g"], P[f"{name}.b"], eps, axis)

    def back(g):
        gx, gg, gb = pb(g)
        P.accumulate(f"{name}.g", gg)
        P.accumulate(f"{name}.b", gb)
        return gx

    return out, back


def batch_norm(P: Scope, name: str, x, training: bool, eps=1e-5, momentum=0.1):
    out, pb, stats = T.batch_norm_vjp(x, P[f"{name}.g"], P[f"{name}.b"],
                                      P.get_stats(name), training, eps, momentum)
    if training:
        P.set_stats(name, stats)

    def back(g):
        gx, gg, gb = pb(g)
        P.accumulate(f"{name}.g", gg)
        P.accumulate(f"{name}.b", gb)
        return gx

    return out, back


def chain(*backs):
    """Compose pullbacks recorded in forward order into one backward function."""
    def back(g):
        for b in reversed(backs):
            g = b(g)
        return g
    return back
