"""Segmentation metrics, boundary Hausdorff distance and the paired Wilcoxon test.

Conventions for degenerate masks:

* any ratio whose denominator is zero (e.g. DSC with both masks empty) is 1,
  since there is nothing to get wrong;
* MCC with a zero denominator is 0;
* Hausdorff distance is 0 when both masks are empty and the image diagonal
  ``sqrt(H**2 + W**2)`` when exactly one is.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage, stats
from scipy.spatial import cKDTree

_CROSS = ndimage.generate_binary_structure(2, 1)


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype == bool:
        return m
    return m >= threshold


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(pred, gt) -> ConfusionCounts:
    p, g = binarize(pred), binarize(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    tn = int(np.count_nonzero(~p & ~g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    counts = ConfusionCounts(tp, tn, fp, fn)
    assert counts.total == p.size, "confusion counts do not cover every pixel"
    return counts


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def mcc(c: ConfusionCounts) -> float:
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if den == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(den)


def dsc(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the foreground.

    Pixels beyond the image border count as background.
    """
    m = binarize(mask)
    if m.ndim != 2:
        m = m.reshape(m.shape[-2:])
    inner = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return m & ~inner


def _max_nearest_sq(src: np.ndarray, dst: np.ndarray) -> int:
    _, idx = cKDTree(dst).query(src)
    diff = src - dst[idx]
    return int((diff * diff).sum(axis=1).max())


def hausdorff(pred, gt) -> float:
    """Symmetric (100th percentile) Hausdorff distance between mask boundaries, in pixels."""
    bp, bg = boundary(pred), boundary(gt)
    if bp.shape != bg.shape:
        raise ValueError(f"mask shapes differ: {bp.shape} vs {bg.shape}")
    a = np.argwhere(bp).astype(np.int64)
    b = np.argwhere(bg).astype(np.int64)
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        H, W = bp.shape
        return math.sqrt(H * H + W * W)
    return math.sqrt(max(_max_nearest_sq(a, b), _max_nearest_sq(b, a)))


@dataclass(frozen=True)
class MetricsReport:
    dsc: float
    iou: float
    precision: float
    recall: float
    specificity: float
    mcc: float
    hd: float
    tp: int
    tn: int
    fp: int
    fn: int

    def as_dict(self) -> dict:
        return asdict(self)


METRIC_NAMES = ("dsc", "iou", "precision", "recall", "specificity", "mcc", "hd")


def report(counts: ConfusionCounts, pred=None, gt=None) -> MetricsReport:
    """All seven metrics; ``hd`` is NaN unless both masks are supplied."""
    hd = hausdorff(pred, gt) if pred is not None and gt is not None else float("nan")
    c = counts
    return MetricsReport(
        dsc=dsc(c),
        iou=iou(c),
        precision=_ratio(c.tp, c.tp + c.fp),
        recall=_ratio(c.tp, c.tp + c.fn),
        specificity=_ratio(c.tn, c.tn + c.fp),
        mcc=mcc(c),
        hd=hd,
        tp=c.tp, tn=c.tn, fp=c.fp, fn=c.fn,
    )


def evaluate_pair(pred, gt) -> MetricsReport:
    return report(confusion(pred, gt), pred, gt)


# ---------------------------------------------------------------- Wilcoxon

EXACT_MAX_N = 12


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # sum of ranks of positive differences
    pvalue: float
    n: int
    method: str  # "exact" or "normal"


def exact_null_distribution(ranks) -> tuple[np.ndarray, np.ndarray]:
    """Null distribution of the positive-rank sum over all 2**n sign patterns.

    Returns ``(values, probabilities)``; ranks may be half-integers (ties).
    """
    doubled = np.rint(2 * np.asarray(ranks, dtype=float)).astype(int)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    support = np.nonzero(counts)[0]
    return support / 2.0, counts[support] / float(2 ** len(doubled))


def wilcoxon_one_tailed(a, b) -> WilcoxonResult:
    """Paired signed-rank test of the alternative ``a > b``.

    Zero differences are dropped; ties in |difference| get average ranks.
    Exact enumeration for n <= 12, otherwise a normal approximation with
    continuity and tie correction.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("wilcoxon needs two equal-length 1-d samples")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("all paired differences are zero; the signed-rank test is undefined")
    if n < 5:
        raise ValueError(f"only {n} non-zero differences; need at least 5")
    ranks = stats.rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        values, probs = exact_null_distribution(ranks)
        p = float(probs[values >= w].sum())
        return WilcoxonResult(w, min(p, 1.0), n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    z = (w - mean - 0.5) / math.sqrt(var)
    return WilcoxonResult(w, float(stats.norm.sf(z)), n, "normal")
