"""Central finite-difference checks of every hand-written pullback.

Each target exposes a scalar objective ``f = sum(out * w)`` for a fixed
random cotangent ``w`` (or the Dice loss for the whole model), a set of
float64 arrays to perturb in place, and the analytic gradient of ``f`` with
respect to each array. The numerical gradient is
``(f(a + h e_i) - f(a - h e_i)) / 2h`` with ``h = 1e-5``.

Error measure, per checked element i of an array::

    |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, floor)

where ``floor = 1e-3 * max_j |numeric_j|`` over every checked element of the
target (all arrays together), or ``1e-10`` if larger. The floor keeps
structurally zero gradients (a bias feeding a normalization, a constant
shift under a softmax) from turning finite-difference noise into a relative
error of 1, while staying tied to the target's own gradient scale. A
target's error is the max over all checked elements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import (CatSpec, cat_block_vjp, context_addition_attention_vjp, d_fcn_vjp,
                        init_attention, init_cat_block, init_d_fcn, spatial_reduce_vjp)
from .blocks import (MergeSpec, conv_g_next_block_vjp, convnext_block_vjp, init_conv_g_next_block,
                     init_convnext_block, init_patch_merge, patch_merge_vjp)
from .fusion import cctfa_vjp, init_cctfa, init_safg, safg_vjp
from .params import ParamStore, init_linear

H_STEP = 1e-5
FLOOR_FRACTION = 1e-3
ABS_FLOOR = 1e-10
THRESHOLDS = {"primitives": 1e-6, "blocks": 1e-4, "model": 1e-3}

# Test hook: when set, called as ``analytic_hook(target_name, grads)`` and its
# return value replaces the analytic gradients before comparison.
analytic_hook: Callable | None = None


@dataclass
class Problem:
    """Arrays to perturb and a callable giving (objective, analytic grads)."""

    arrays: dict
    objective: Callable[[], float]
    gradients: Callable[[], dict]
    max_per_array: int | None = None  # None checks every element
    total_budget: int | None = None   # sample this many elements across all arrays


@dataclass(frozen=True)
class Target:
    name: str
    scope: str
    shape: tuple
    make: Callable[[np.random.Generator, tuple], Problem]

    @property
    def threshold(self) -> float:
        return THRESHOLDS[self.scope]


@dataclass(frozen=True)
class CheckResult:
    name: str
    scope: str
    max_rel_err: float
    threshold: float
    n_checked: int
    finite: bool

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_err < self.threshold


def _dot(out, w) -> float:
    return math.fsum(np.ravel(out * w))


# ---------------------------------------------------------------- primitives

def _primitive(fn, inputs: dict, static: dict | None = None, wrt=None) -> Callable:
    """Problem for ``fn(**inputs, **static) -> (out, pullback)``.

    ``wrt`` lists the inputs that receive gradients, in pullback order.
    """
    static = static or {}
    wrt = list(inputs) if wrt is None else wrt

    def make(rng, _shape):
        arrays = {k: v.copy() for k, v in inputs.items()}
        out0 = fn(**arrays, **static)[0]
        w = rng.standard_normal(out0.shape)

        def objective():
            return _dot(fn(**arrays, **static)[0], w)

        def gradients():
            grads = fn(**arrays, **static)[1](w)
            return {k: g for k, g in zip(wrt, grads) if g is not None}

        return Problem({k: arrays[k] for k in wrt}, objective, gradients)

    return make


def _prim_target(name, shape, build):
    """``build(rng, shape) -> (fn, inputs, static, wrt)``."""
    def make(rng, shape_):
        fn, inputs, static, wrt = build(rng, shape_)
        return _primitive(fn, inputs, static, wrt)(rng, shape_)

    return Target(name, "primitives", shape, make)


def _n(rng, *shape):
    return rng.standard_normal(shape)


def _bn_train(x, gamma, beta):
    out, pullback, _ = T.batch_norm_vjp(x, gamma, beta, None, True)
    return out, pullback


def _bn_eval(x, gamma, beta, mean, var):
    stats = T.RunningStats(mean, var, 1)
    out, pullback, _ = T.batch_norm_vjp(x, gamma, beta, stats, False)
    return out, pullback


def _concat3(a, b, c):
    return T.concat_vjp([a, b, c], axis=1)


def _primitive_targets() -> list[Target]:
    def conv(pad_mode, stride, padding, k):
        def build(rng, s):
            B, C, H, W = s
            return (T.conv2d_vjp, {"x": _n(rng, *s), "w": _n(rng, 4, C, k, k), "b": _n(rng, 4)},
                    {"stride": stride, "padding": padding, "pad_mode": pad_mode}, ["x", "w", "b"])
        return build

    def dw(pad_mode):
        def build(rng, s):
            C = s[1]
            return (T.depthwise_conv2d_vjp, {"x": _n(rng, *s), "w": _n(rng, C, 1, 3, 3), "b": _n(rng, C)},
                    {"padding": 1, "pad_mode": pad_mode}, ["x", "w", "b"])
        return build

    def pad(mode):
        return lambda rng, s: (T.pad2d_vjp, {"x": _n(rng, *s)}, {"p": 2, "mode": mode}, ["x"])

    def unary(fn, **static):
        return lambda rng, s: (fn, {"x": _n(rng, *s)}, static, ["x"])

    def ln(rng, s):
        C = s[1]
        return (T.layer_norm_vjp, {"x": _n(rng, *s), "gamma": _n(rng, C), "beta": _n(rng, C)},
                {}, ["x", "gamma", "beta"])

    def bn(rng, s):
        C = s[1]
        return (_bn_train, {"x": _n(rng, *s), "gamma": _n(rng, C), "beta": _n(rng, C)},
                {}, ["x", "gamma", "beta"])

    def bn_eval(rng, s):
        C = s[1]
        return (_bn_eval, {"x": _n(rng, *s), "gamma": _n(rng, C), "beta": _n(rng, C),
                           "mean": _n(rng, C), "var": rng.uniform(0.5, 2.0, C)},
                {}, ["x", "gamma", "beta"])

    def tconv(rng, s):
        C = s[1]
        return (T.transposed_conv2d_vjp, {"x": _n(rng, *s), "w": _n(rng, C, 3, 2, 2), "b": _n(rng, 3)},
                {"stride": 2}, ["x", "w", "b"])

    def binary(fn, bshape):
        return lambda rng, s: (fn, {"a": _n(rng, *s), "b": _n(rng, *bshape)}, {}, ["a", "b"])

    def matmul(rng, s):
        return (T.matmul_vjp, {"a": _n(rng, *s), "b": _n(rng, s[-1], 4)}, {}, ["a", "b"])

    def linear(rng, s):
        return (T.linear_vjp, {"x": _n(rng, *s), "w": _n(rng, s[-1], 5), "b": _n(rng, 5)},
                {}, ["x", "w", "b"])

    def concat(rng, s):
        B, C, H, W = s
        return (_concat3, {"a": _n(rng, *s), "b": _n(rng, B, 1, H, W), "c": _n(rng, *s)},
                {}, ["a", "b", "c"])

    def reshape(rng, s):
        return (T.reshape_vjp, {"x": _n(rng, *s)}, {"shape": (s[0], -1)}, ["x"])

    def transpose(rng, s):
        return (T.transpose_vjp, {"x": _n(rng, *s)}, {"axes": (0, 2, 3, 1)}, ["x"])

    img = (2, 3, 6, 5)
    return [
        _prim_target("pad2d.zeros", img, pad("zeros")),
        _prim_target("pad2d.circular", img, pad("circular")),
        _prim_target("pad2d.reflect", img, pad("reflect")),
        _prim_target("conv2d.3x3_s1", (2, 3, 6, 6), conv("zeros", 1, 1, 3)),
        _prim_target("conv2d.3x3_s2_circular", (2, 3, 6, 6), conv("circular", 2, 1, 3)),
        _prim_target("conv2d.7x7_s4", (1, 3, 8, 8), conv("zeros", 4, 3, 7)),
        _prim_target("conv2d.1x1", (2, 3, 4, 5), conv("zeros", 1, 0, 1)),
        _prim_target("depthwise_conv2d.zeros", (2, 3, 5, 5), dw("zeros")),
        _prim_target("depthwise_conv2d.reflect", (2, 3, 5, 5), dw("reflect")),
        _prim_target("transposed_conv2d", (2, 4, 3, 3), tconv),
        _prim_target("layer_norm", (2, 5, 3, 3), ln),
        _prim_target("batch_norm.train", (3, 4, 3, 3), bn),
        _prim_target("batch_norm.eval", (2, 4, 3, 3), bn_eval),
        _prim_target("gelu", img, unary(T.gelu_vjp)),
        _prim_target("sigmoid", img, unary(T.sigmoid_vjp)),
        _prim_target("softmax", img, unary(T.softmax_vjp, axis=1)),
        _prim_target("add.broadcast", img, binary(T.add_vjp, (1, 3, 1, 5))),
        _prim_target("mul.broadcast", img, binary(T.mul_vjp, (2, 1, 6, 5))),
        _prim_target("matmul", (2, 3, 6), matmul),
        _prim_target("linear", (2, 7, 6), linear),
        _prim_target("concat", img, concat),
        _prim_target("reshape", img, reshape),
        _prim_target("transpose", img, transpose),
        _prim_target("global_avg_pool", img, unary(T.global_avg_pool_vjp)),
        _prim_target("channel_pool", img, unary(T.channel_pool_vjp)),
        _prim_target("bilinear_upsample", (2, 3, 3, 4), unary(T.bilinear_upsample_vjp, out_h=12, out_w=16)),
    ]


# ---------------------------------------------------------------- blocks

def _scramble(store: ParamStore, rng, std=0.5):
    """Replace initial weights by O(1) values so every nonlinearity is exercised."""
    for name, p in store.params.items():
        if name.endswith(".g"):
            p[...] = 1.0 + 0.3 * rng.standard_normal(p.shape)
        else:
            p[...] = std * rng.standard_normal(p.shape)


def _block(init, run, n_inputs: int = 1, per_array: int = 24):
    """Problem for ``run(P, *xs) -> (out, back)``; ``back`` returns input cotangents."""

    def make(rng, shape):
        store = ParamStore(dtype=np.float64)
        P = store.scope()
        init(P, rng, shape)
        _scramble(store, rng)
        xs = [rng.standard_normal(shape) for _ in range(n_inputs)]
        w = rng.standard_normal(run(P, *xs)[0].shape)

        def objective():
            return _dot(run(P, *xs)[0], w)

        def gradients():
            store.zero_grad()
            gx = run(P, *xs)[1](w)
            gx = gx if isinstance(gx, tuple) else (gx,)
            grads = {f"input{i}": g for i, g in enumerate(gx)}
            grads.update({k: g.copy() for k, g in store.grads.items()})
            return grads

        arrays = {f"input{i}": x for i, x in enumerate(xs)}
        arrays.update(store.params)
        return Problem(arrays, objective, gradients, max_per_array=per_array)

    return make


def _block_targets() -> list[Target]:
    cat_spec = CatSpec(dim=8, heads=2, reduction=4)
    cat_circ = CatSpec(dim=8, heads=1, reduction=2, pad_mode="circular")
    overlap = MergeSpec("overlap", 4, 8, 3, 2)
    nonoverlap = MergeSpec("nonoverlap", 4, 8, 2, 2, norm_first=True)
    stem = MergeSpec("overlap", 3, 8, 7, 4)

    def att(R, heads):
        return _block(lambda P, rng, s: init_attention(P, rng, s[1], R),
                      lambda P, x: context_addition_attention_vjp(P, x, heads, R))

    def reduce(R):
        def init(P, rng, s):
            init_linear(P, rng, "sr", R * s[2], s[2])

        def run(P, x):
            h = w = int(round(math.sqrt(x.shape[1])))
            return spatial_reduce_vjp(P, x, (h, w), R)

        return _block(init, run)

    return [
        Target("spatial_reduce", "blocks", (2, 16, 4), reduce(4)),
        Target("attention.R1", "blocks", (1, 8, 4, 4), att(1, 2)),
        Target("attention.R8", "blocks", (1, 8, 8, 8), att(8, 1)),
        Target("d_fcn", "blocks", (1, 8, 6, 6),
               _block(lambda P, rng, s: init_d_fcn(P, rng, s[1], 4),
                      lambda P, z, t: d_fcn_vjp(P, z, t), n_inputs=2)),
        Target("cat_block", "blocks", (1, 8, 8, 8),
               _block(lambda P, rng, s: init_cat_block(P, rng, cat_spec),
                      lambda P, x: cat_block_vjp(P, x, cat_spec))),
        Target("cat_block.circular", "blocks", (1, 8, 4, 4),
               _block(lambda P, rng, s: init_cat_block(P, rng, cat_circ),
                      lambda P, x: cat_block_vjp(P, x, cat_circ))),
        Target("convnext_block", "blocks", (1, 8, 8, 8),
               _block(lambda P, rng, s: init_convnext_block(P, rng, s[1]),
                      lambda P, x: convnext_block_vjp(P, x))),
        Target("conv_g_next_block.train", "blocks", (2, 4, 6, 6),
               _block(lambda P, rng, s: init_conv_g_next_block(P, rng, s[1]),
                      lambda P, x: conv_g_next_block_vjp(P, x, True))),
        Target("patch_merge.overlap", "blocks", (1, 4, 6, 6),
               _block(lambda P, rng, s: init_patch_merge(P, rng, overlap),
                      lambda P, x: patch_merge_vjp(P, x, overlap))),
        Target("patch_merge.stem", "blocks", (1, 3, 8, 8),
               _block(lambda P, rng, s: init_patch_merge(P, rng, stem),
                      lambda P, x: patch_merge_vjp(P, x, stem))),
        Target("patch_merge.norm_first", "blocks", (1, 4, 6, 6),
               _block(lambda P, rng, s: init_patch_merge(P, rng, nonoverlap),
                      lambda P, x: patch_merge_vjp(P, x, nonoverlap))),
        Target("cctfa", "blocks", (1, 4, 6, 6),
               _block(lambda P, rng, s: init_cctfa(P, rng, s[1]),
                      lambda P, t, c: cctfa_vjp(P, t, c), n_inputs=2)),
        Target("safg", "blocks", (1, 4, 6, 6),
               _block(lambda P, rng, s: init_safg(P, rng, s[1]),
                      lambda P, e, d: safg_vjp(P, e, d), n_inputs=2)),
    ]


# ---------------------------------------------------------------- model

def _model_problem(rng, shape, n_params: int = 100):
    """Dice loss of a reduced tiny model at an O(1) random weight point.

    The SAFG gate logits (``psi``) start at zero so the site-softmax gate is
    uniform; with random O(1) gate weights the N-scaled gate multiplies
    activations by up to N per stage and saturates the sigmoid, leaving
    gradients below the finite-difference resolution of the loss.
    """
    from .model import ModelConfig, build, forward_vjp
    from .training import generalized_dice_loss

    B, C, H, W = shape
    cfg = ModelConfig.variant("tiny", channels=(8, 16, 32, 64), heads=(1, 2, 2, 4), input_hw=(H, W))
    model = build(cfg, seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    for name, p in model.store.params.items():
        if ".psi." in name:
            p[...] = 0.0
        elif not name.endswith(".g"):
            p[...] = 0.2 * rng.standard_normal(p.shape)
    x = rng.standard_normal(shape)
    y = (rng.random((B, 1, H, W)) < 0.4).astype(np.float64)

    def objective():
        return generalized_dice_loss(forward_vjp(model, x, training=True)[0], y)[0]

    def gradients():
        model.store.zero_grad()
        probs, back = forward_vjp(model, x, training=True)
        back(generalized_dice_loss(probs, y)[1])
        return {k: g.copy() for k, g in model.store.grads.items()}

    return Problem(dict(model.store.params), objective, gradients, total_budget=n_params)


def _model_targets() -> list[Target]:
    return [Target("tiny_model.dice_loss", "model", (2, 3, 64, 64), _model_problem)]


TARGETS: dict[str, Target] = {t.name: t for t in
                              _primitive_targets() + _block_targets() + _model_targets()}


def targets(scope: str) -> list[Target]:
    if scope not in THRESHOLDS:
        raise ValueError(f"scope must be one of {sorted(THRESHOLDS)}, got {scope!r}")
    return [t for t in TARGETS.values() if t.scope == scope]


# ---------------------------------------------------------------- driver

def _choose(prob: Problem, rng) -> list[tuple[str, np.ndarray]]:
    picks = []
    if prob.total_budget is not None:
        names = list(prob.arrays)
        sizes = np.array([prob.arrays[n].size for n in names])
        flat = rng.choice(int(sizes.sum()), size=min(prob.total_budget, int(sizes.sum())), replace=False)
        owner = np.searchsorted(np.cumsum(sizes), flat, side="right")
        offsets = flat - np.concatenate([[0], np.cumsum(sizes)])[owner]
        for i, n in enumerate(names):
            sel = np.sort(offsets[owner == i])
            if len(sel):
                picks.append((n, sel))
        return picks
    for n, a in prob.arrays.items():
        if prob.max_per_array is None or a.size <= prob.max_per_array:
            picks.append((n, np.arange(a.size)))
        else:
            picks.append((n, np.sort(rng.choice(a.size, prob.max_per_array, replace=False))))
    return picks


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Elementwise error; ``scale`` defaults to the largest |numeric| entry."""
    if scale is None:
        scale = float(np.max(np.abs(numeric), initial=0.0))
    floor = max(FLOOR_FRACTION * scale, ABS_FLOOR)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / den


def numeric_gradient(prob: Problem, arr_name: str, idx, h: float = H_STEP) -> np.ndarray:
    flat = prob.arrays[arr_name].reshape(-1)  # view: arrays are contiguous
    num = np.empty(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = prob.objective()
        flat[i] = orig - h
        fm = prob.objective()
        flat[i] = orig
        num[j] = (fp - fm) / (2 * h)
    return num


def check_problem(name: str, prob: Problem, rng, h: float = H_STEP) -> tuple[float, int, bool]:
    grads = prob.gradients()
    if analytic_hook is not None:
        grads = analytic_hook(name, grads)
    analytic, numeric = [], []
    for arr_name, idx in _choose(prob, rng):
        arr = prob.arrays[arr_name]
        analytic.append(np.asarray(grads.get(arr_name, np.zeros_like(arr)), dtype=np.float64).ravel()[idx])
        numeric.append(numeric_gradient(prob, arr_name, idx, h))
    a = np.concatenate(analytic) if analytic else np.zeros(0)
    n = np.concatenate(numeric) if numeric else np.zeros(0)
    if not np.all(np.isfinite(a)):
        return math.inf, len(a), False
    return float(relative_errors(a, n).max(initial=0.0)), len(a), True


def grad_check(block_id: str, shape=None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return run_target(TARGETS[block_id], shape, seed).max_rel_err


def run_target(target: Target, shape=None, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    prob = target.make(rng, tuple(shape) if shape is not None else target.shape)
    err, n, finite = check_problem(target.name, prob, rng)
    return CheckResult(target.name, target.scope, err if finite else math.inf, target.threshold, n, finite)


def run_scope(scope: str, seed: int = 0) -> list[CheckResult]:
    return [run_target(t, seed=seed) for t in targets(scope)]


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'target':<{width}}  {'max_rel_err':>11}  {'threshold':>9}  {'checked':>7}  verdict"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:11.3e}  {r.threshold:9.0e}  {r.n_checked:7d}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
