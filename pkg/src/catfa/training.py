"""Generalized Dice loss, AdamW, a synthetic segmentation task and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import metrics
from .model import Model, forward_vjp

log = logging.getLogger(__name__)


class DomainError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------- loss

def _overlap_ratio(p: np.ndarray, r: np.ndarray, eps: float):
    num = float(np.dot(p, r)) + eps
    den = float(p.sum()) + float(r.sum()) + eps
    return num / den, num, den


def generalized_dice_loss(P, R, eps: float = 1e-6):
    """Two-class Dice loss and its gradient with respect to ``P``.

    L = 1 - (sum pr + eps) / (sum p + r + eps)
          - (sum (1-p)(1-r) + eps) / (sum 2 - p - r + eps)

    The background term is the foreground term evaluated on (1-P, 1-R), so
    swapping both arguments for their complements exchanges the two terms.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    P = np.asarray(P)
    R = np.asarray(R)
    if P.shape != R.shape:
        raise ValueError(f"prediction {P.shape} and reference {R.shape} differ in shape")
    if P.size and (P.min() < 0 or P.max() > 1 or not np.all(np.isfinite(P))):
        raise DomainError("predictions must lie in [0, 1]")
    p = P.astype(np.float64).ravel()
    r = R.astype(np.float64).ravel()
    fg, n1, d1 = _overlap_ratio(p, r, eps)
    bg, n2, d2 = _overlap_ratio(1.0 - p, 1.0 - r, eps)
    loss = 1.0 - (fg + bg)
    # d fg/dp = r/d1 - n1/d1^2 ; d bg/dp = -(1-r)/d2 + n2/d2^2
    grad = -(r / d1 - n1 / d1 ** 2) - (-(1.0 - r) / d2 + n2 / d2 ** 2)
    return loss, grad.reshape(P.shape).astype(P.dtype, copy=False)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimState) -> dict:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthSample:
    image: np.ndarray  # 3 x H x W, unit intensity scale
    mask: np.ndarray   # 1 x H x W, values in {0, 1}


FG_RANGE = (0.05, 0.6)
_SUPERSAMPLE = 4


def _shape_coverage(kind, cy, cx, ry, rx, theta, hw, ss=_SUPERSAMPLE):
    """Pixel-centre membership and anti-aliased coverage of one shape."""
    off = (np.arange(ss) + 0.5) / ss - 0.5
    yy = (np.arange(hw)[:, None] + off[None, :]).ravel()
    Y, X = np.meshgrid(yy, yy, indexing="ij")
    Yc, Xc = np.meshgrid(np.arange(hw, dtype=float), np.arange(hw, dtype=float), indexing="ij")

    def inside(Y, X):
        dy, dx = Y - cy, X - cx
        c, s = np.cos(theta), np.sin(theta)
        u, v = c * dx + s * dy, -s * dx + c * dy
        if kind == "ellipse":
            return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        return (np.abs(u) <= rx) & (np.abs(v) <= ry)

    cover = inside(Y, X).reshape(hw, ss, hw, ss).mean(axis=(1, 3))
    return inside(Yc, Xc), cover


def _background(rng, hw):
    noise = ndimage.gaussian_filter(rng.standard_normal((3, hw, hw)), sigma=(0, 2.5, 2.5), mode="wrap")
    noise /= noise.std() + 1e-12
    base = rng.uniform(0.15, 0.35)
    return base + 0.05 * noise


def _one_sample(rng, hw, task):
    for _ in range(1000):
        img = _background(rng, hw)
        mask = np.zeros((hw, hw), dtype=bool)
        if task == "quadrant":
            # identical-looking target (top-left quadrant) and distractor elsewhere
            half = hw // 2
            r = rng.uniform(0.16, 0.22) * hw
            level = rng.uniform(0.6, 0.95, size=3)
            spots = [(0, 0), [(0, 1), (1, 0), (1, 1)][rng.integers(3)]]
            for qi, (qy, qx) in enumerate(spots):
                cy = qy * half + rng.uniform(r, half - r)
                cx = qx * half + rng.uniform(r, half - r)
                inside, cover = _shape_coverage("ellipse", cy, cx, r, r, 0.0, hw)
                img = img * (1 - cover) + level[:, None, None] * cover
                if qi == 0:
                    mask |= inside
        else:
            n_shapes = int(rng.integers(1, 4))
            levels = rng.permutation(np.linspace(0.6, 0.95, 3))[:n_shapes]
            for level in levels:
                kind = "ellipse" if rng.random() < 0.6 else "rect"
                ry, rx = rng.uniform(0.1, 0.28, size=2) * hw
                cy, cx = rng.uniform(0.15, 0.85, size=2) * hw
                theta = rng.uniform(0, np.pi)
                inside, cover = _shape_coverage(kind, cy, cx, ry, rx, theta, hw)
                tint = level + rng.uniform(-0.05, 0.05, size=3)
                img = img * (1 - cover) + tint[:, None, None] * cover
                mask |= inside
        frac = mask.mean()
        if FG_RANGE[0] <= frac <= FG_RANGE[1]:
            return SynthSample(img.astype(np.float32), mask[None].astype(np.float32))
    raise RuntimeError("could not draw a sample inside the foreground-fraction range")


def make_synth_dataset(n: int, hw: int, seed: int, task: str = "shapes") -> list[SynthSample]:
    """Deterministic synthetic binary segmentation samples.

    ``task="shapes"``: 1-3 anti-aliased ellipses/rectangles of distinct
    brightness over spatially correlated noise; the mask is the union of
    shape interiors. ``task="quadrant"``: two identical-looking discs, only
    the one in the top-left quadrant is foreground.
    """
    if hw % 32:
        raise ValueError(f"image size {hw} must be divisible by 32")
    if task not in ("shapes", "quadrant"):
        raise ValueError(f"unknown synthetic task {task!r}")
    rng = np.random.default_rng(seed)
    return [_one_sample(rng, hw, task) for _ in range(n)]


def standardize(images: np.ndarray) -> np.ndarray:
    """Per-image, per-channel linear scaling to zero mean and unit variance."""
    mu = images.mean(axis=(-2, -1), keepdims=True)
    sd = images.std(axis=(-2, -1), keepdims=True)
    return ((images - mu) / (sd + 1e-6)).astype(np.float32)


def split_dataset(dataset: list, seed: int, val_fraction: float = 0.25):
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_val = int(round(len(dataset) * val_fraction))
    val = [dataset[i] for i in sorted(order[:n_val])]
    train = [dataset[i] for i in sorted(order[n_val:])]
    return train, val


def stack(samples: list[SynthSample]):
    x = standardize(np.stack([s.image for s in samples]))
    y = np.stack([s.mask for s in samples]).astype(np.float32)
    return x, y


# ---------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    epochs: int = 50
    batch: int = 8
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    eps_loss: float = 1e-6
    seed: int = 0
    flip: bool = False
    val_fraction: float = 0.25


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    seed: int


def predict(model: Model, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Eval-mode probabilities for standardized images, batched."""
    outs = [forward_vjp(model, images[i:i + batch], training=False)[0]
            for i in range(0, len(images), batch)]
    return np.concatenate(outs, axis=0)


def mean_dice(probs: np.ndarray, masks: np.ndarray) -> float:
    return float(np.mean([metrics.dsc(metrics.confusion(p[0], m[0])) for p, m in zip(probs, masks)]))


def _first_nonfinite(named: list) -> str | None:
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            return name
    return None


def train_step(model: Model, x, y, state: OptimState, eps_loss: float) -> float:
    store = model.store
    store.zero_grad()
    probs, back = forward_vjp(model, x, training=True)
    loss, g = generalized_dice_loss(probs, y, eps_loss) if np.all(np.isfinite(probs)) else (np.nan, None)
    if not np.isfinite(loss):
        bad = _first_nonfinite([("input batch", x)] + list(store.params.items()) + [("model output", probs)])
        raise TrainingDivergedError(f"non-finite loss; first non-finite tensor: {bad or 'loss'}")
    back(g)
    bad = _first_nonfinite(list(store.grads.items()))
    if bad is not None:
        raise TrainingDivergedError(f"non-finite gradient in {bad}")
    adamw_step(store.params, store.grads, state)
    return loss


def train(model: Model, dataset: list, cfg: TrainConfig, on_epoch=None) -> list[EpochRecord]:
    """Train on a deterministic 75/25 split of ``dataset``; one record per epoch."""
    train_set, val_set = split_dataset(dataset, cfg.seed, cfg.val_fraction)
    x_tr, y_tr = stack(train_set)
    x_val, y_val = stack(val_set)
    rng = np.random.default_rng(cfg.seed + 1)
    state = OptimState(lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x_tr))
        losses = []
        for i in range(0, len(order), cfg.batch):
            idx = order[i:i + cfg.batch]
            xb, yb = x_tr[idx], y_tr[idx]
            if cfg.flip:
                if rng.random() < 0.5:
                    xb, yb = xb[..., ::-1], yb[..., ::-1]
                if rng.random() < 0.5:
                    xb, yb = xb[..., ::-1, :], yb[..., ::-1, :]
                xb, yb = np.ascontiguousarray(xb), np.ascontiguousarray(yb)
            losses.append(train_step(model, xb, yb, state, cfg.eps_loss))
        probs = predict(model, x_val)
        val_loss, _ = generalized_dice_loss(probs, y_val, cfg.eps_loss)
        rec = EpochRecord(epoch, float(np.mean(losses)), float(val_loss), mean_dice(probs, y_val), cfg.seed)
        history.append(rec)
        log.info("epoch %d train_loss %.4f val_loss %.4f val_dice %.4f",
                 epoch, rec.train_loss, rec.val_loss, rec.val_dice)
        if on_epoch is not None:
            on_epoch(rec)
    return history
