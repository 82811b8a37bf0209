"""Confusion-count metrics, Hausdorff distance and the signed-rank test."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from catfa import metrics as M


def brute_boundary(mask):
    H, W = mask.shape
    out = []
    for i in range(H):
        for j in range(W):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if not (0 <= a < H and 0 <= b < W) or not mask[a, b]:
                    out.append((i, j))
                    break
    return out


def brute_hausdorff(p, g):
    a, b = brute_boundary(p), brute_boundary(g)
    if not a and not b:
        return 0.0
    if not a or not b:
        return math.hypot(*p.shape)

    def directed(src, dst):
        return max(min((x - u) ** 2 + (y - v) ** 2 for u, v in dst) for x, y in src)

    return math.sqrt(max(directed(a, b), directed(b, a)))


def brute_exact_p(d):
    """One-tailed p by listing every sign pattern of the ranked |differences|."""
    d = np.asarray(d, float)
    d = d[d != 0]
    ranks = stats.rankdata(np.abs(d))
    w = ranks[d > 0].sum()
    hits = sum(1 for signs in itertools.product((0, 1), repeat=len(d))
               if np.dot(signs, ranks) >= w - 1e-9)
    return hits / 2 ** len(d)


def random_pair(rng, h, w):
    density = rng.uniform(0.05, 0.95)
    return rng.random((h, w)) < density, rng.random((h, w)) < rng.uniform(0.05, 0.95)


# ---------------------------------------------------------------- confusion metrics

def test_two_by_two_enumeration():
    c = M.confusion(np.array([[1, 1], [0, 0]]), np.array([[1, 0], [1, 0]]))
    assert (c.tp, c.tn, c.fp, c.fn) == (1, 1, 1, 1)


def test_identical_and_complementary_masks():
    g = np.random.default_rng(0).random((9, 7)) < 0.4
    c = M.confusion(g, g)
    assert c.fp == c.fn == 0
    c = M.confusion(~g, g)
    assert c.tp == c.tn == 0


def test_probabilities_threshold_at_half():
    c = M.confusion(np.array([0.49, 0.5, 0.9]), np.array([0.0, 1.0, 1.0]))
    assert (c.tp, c.tn, c.fp, c.fn) == (2, 1, 0, 0)


def test_perfect_prediction_report():
    g = np.zeros((8, 8), bool)
    g[2:5, 3:7] = True
    r = M.evaluate_pair(g, g)
    assert (r.dsc, r.iou, r.precision, r.recall, r.specificity, r.mcc, r.hd) == (1, 1, 1, 1, 1, 1, 0)


def test_mcc_hand_value():
    c = M.ConfusionCounts(tp=2, tn=2, fp=1, fn=1)
    assert M.mcc(c) == pytest.approx(1 / 3, abs=1e-15)


def test_empty_conventions():
    z = np.zeros((4, 4), bool)
    r = M.evaluate_pair(z, z)
    assert r.dsc == 1.0 and r.iou == 1.0 and r.mcc == 0.0 and r.hd == 0.0


def test_formulas_on_a_thousand_pairs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        h, w = rng.integers(1, 12, size=2)
        p, g = random_pair(rng, h, w)
        c = M.confusion(p, g)
        tp = int(np.sum(p & g))
        fp = int(np.sum(p & ~g))
        fn = int(np.sum(~p & g))
        tn = int(np.sum(~p & ~g))
        assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
        r = M.report(c)
        if 2 * tp + fp + fn:
            assert abs(r.dsc - 2 * tp / (2 * tp + fp + fn)) <= 1e-12
            assert abs(r.iou - tp / (tp + fp + fn)) <= 1e-12
        assert abs(r.dsc - 2 * r.iou / (1 + r.iou)) <= 1e-12
        assert r.dsc >= r.iou
        for name in ("dsc", "iou", "precision", "recall", "specificity"):
            assert 0.0 <= getattr(r, name) <= 1.0
        assert -1.0 <= r.mcc <= 1.0
        den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        if den:
            assert abs(r.mcc - (tp * tn - fp * fn) / math.sqrt(den)) <= 1e-12


def test_shape_mismatch():
    with pytest.raises(ValueError, match="differ"):
        M.confusion(np.zeros((2, 2)), np.zeros((2, 3)))


# ---------------------------------------------------------------- Hausdorff

def test_single_pixels_three_four_five():
    a = np.zeros((10, 10), bool)
    b = np.zeros((10, 10), bool)
    a[1, 1] = True
    b[4, 5] = True
    assert M.hausdorff(a, b) == 5.0


def test_nested_squares():
    gt = np.zeros((16, 16), bool)
    gt[3:13, 3:13] = True
    pred = np.zeros_like(gt)
    pred[5:11, 5:11] = True
    assert M.hausdorff(pred, gt) == pytest.approx(2 * math.sqrt(2), abs=1e-15)
    assert M.hausdorff(pred, gt) == brute_hausdorff(pred, gt)


def test_one_empty_mask_gives_diagonal():
    a = np.zeros((6, 8), bool)
    b = a.copy()
    b[2, 2] = True
    assert M.hausdorff(a, b) == 10.0


def test_hausdorff_equals_brute_force_up_to_32():
    rng = np.random.default_rng(2)
    for size in (1, 2, 3, 5, 8, 13, 21, 32):
        for _ in range(4):
            p, g = random_pair(rng, size, size)
            assert M.hausdorff(p, g) == brute_hausdorff(p, g)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_hausdorff_symmetric_and_triangle(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.random((10, 10)) < rng.uniform(0.1, 0.9) for _ in range(3))
    hab, hbc, hac = M.hausdorff(a, b), M.hausdorff(b, c), M.hausdorff(a, c)
    assert hab == M.hausdorff(b, a)
    # the triangle inequality is for the boundary point sets, which are all non-empty here
    if all(M.boundary(m).any() for m in (a, b, c)):
        assert hac <= hab + hbc + 1e-12


# ---------------------------------------------------------------- Wilcoxon

def test_all_positive_six():
    a = np.arange(1, 7, dtype=float) + 0.5
    r = M.wilcoxon_one_tailed(a, np.zeros(6))
    assert r.method == "exact" and r.pvalue == 1 / 64 and r.statistic == 21.0


def test_zero_differences_error():
    with pytest.raises(ValueError, match="zero"):
        M.wilcoxon_one_tailed([1.0] * 6, [1.0] * 6)


def test_too_few_differences_error():
    with pytest.raises(ValueError, match="at least 5"):
        M.wilcoxon_one_tailed([1, 2, 3, 4, 5, 6.0], [0, 0, 0, 0, 5, 6.0])


@pytest.mark.parametrize("n", range(5, 13))
def test_exact_p_equals_full_enumeration(n):
    rng = np.random.default_rng(n)
    for trial in range(3):
        d = rng.normal(0.2, 1.0, n)
        if trial == 2:
            d = np.round(d, 1)  # ties and possibly zeros
            d[d == 0] = 0.1
        r = M.wilcoxon_one_tailed(d, np.zeros(n))
        assert r.pvalue == brute_exact_p(d)


@pytest.mark.parametrize("n", range(1, 13))
def test_null_distribution_sums_to_one(n):
    values, probs = M.exact_null_distribution(np.arange(1, n + 1))
    assert math.isclose(probs.sum(), 1.0, abs_tol=1e-15)
    assert values[0] == 0 and values[-1] == n * (n + 1) / 2


def test_large_sample_uses_normal_approximation():
    rng = np.random.default_rng(3)
    a, b = rng.normal(0.3, 1, 40), np.zeros(40)
    r = M.wilcoxon_one_tailed(a, b)
    ref = stats.wilcoxon(a, b, alternative="greater", correction=True, method="approx")
    assert r.method == "normal"
    assert r.pvalue == pytest.approx(ref.pvalue, rel=1e-10)
