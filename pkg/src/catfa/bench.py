"""Micro-benchmark of the attention kernel under spatial reduction of keys/values."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .attention import attention_macs, reduction_factors, scaled_attention


def standard_attention(q, k, v):
    """Reference softmax(q k^T / sqrt(d)) v written out directly."""
    s = (q @ k.T) / math.sqrt(q.shape[-1])
    s = np.exp(s - s.max(axis=-1, keepdims=True))
    s /= s.sum(axis=-1, keepdims=True)
    return s @ v


@dataclass
class BenchRow:
    kernel: str
    reduction: int
    tokens: int
    keys: int
    channels: int
    score_macs: int
    aggregate_macs: int
    total_macs: int
    median_s: float


def _median_time(fn, reps: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run_bench(n_tokens: int, channels: int, reductions, reps: int = 20, seed: int = 0,
              dtype=np.float32, include_standard: bool = True) -> list[BenchRow]:
    side = math.isqrt(n_tokens)
    if side * side != n_tokens:
        raise ValueError(f"token count {n_tokens} must be a square grid")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n_tokens, channels)).astype(dtype)
    rows = []
    for R in reductions:
        rh, rw = reduction_factors(R)
        if side % rh or side % rw:
            raise ValueError(f"{side}x{side} token grid not divisible by {rh}x{rw} blocks for R={R}")
        n_keys = n_tokens // R
        k = rng.standard_normal((n_keys, channels)).astype(dtype)
        v = rng.standard_normal((n_keys, channels)).astype(dtype)
        macs = attention_macs(n_tokens, n_keys, channels)
        t = _median_time(lambda: scaled_attention(q, k, v), reps)
        rows.append(BenchRow("reduced", R, n_tokens, n_keys, channels,
                             macs["score"], macs["aggregate"], macs["total"], t))
    if include_standard:
        k = rng.standard_normal((n_tokens, channels)).astype(dtype)
        v = rng.standard_normal((n_tokens, channels)).astype(dtype)
        macs = attention_macs(n_tokens, n_tokens, channels)
        t = _median_time(lambda: standard_attention(q, k, v), reps)
        rows.append(BenchRow("standard", 1, n_tokens, n_tokens, channels,
                             macs["score"], macs["aggregate"], macs["total"], t))
    return rows


def rows_to_csv(rows: list[BenchRow]) -> str:
    cols = list(asdict(rows[0]))
    lines = [",".join(cols)]
    for r in rows:
        d = asdict(r)
        d["median_s"] = f"{r.median_s:.6g}"
        lines.append(",".join(str(d[c]) for c in cols))
    return "\n".join(lines) + "\n"
