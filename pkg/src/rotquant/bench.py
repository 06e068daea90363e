"""Fused Kronecker apply versus dense ``X @ R`` timing and scaling fit."""

from __future__ import annotations

import csv
import io
import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from .kron import KronPlan, dense_apply_batch, factorize, fused_apply_batch
from .tensor import make_rng, random_orthogonal

log = logging.getLogger(__name__)

DEFAULT_GRID = (1024, 4096, 16384)


@dataclass(frozen=True)
class BenchRow:
    method: str
    n: int
    n1: int
    n2: int
    tokens: int
    mean_ns: float
    stddev_ns: float


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    d = 2
    while d * d <= n:
        if n % d == 0:
            return False
        d += 1
    return True


def _time(fn, repeats: int) -> tuple[float, float]:
    fn()  # warm-up
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    a = np.array(samples, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if repeats > 1 else 0.0


def single_thread():
    """Context manager limiting BLAS to one thread, when threadpoolctl is present."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        log.warning("threadpoolctl unavailable; BLAS thread count not pinned")
        return nullcontext()
    return threadpool_limits(limits=1)


def run_bench(grid=DEFAULT_GRID, tokens: int = 64, repeats: int = 5, seed: int = 0, dense: bool = True) -> list[BenchRow]:
    """Time fused and dense application for each ``n`` in ``grid``.

    Prime sizes are skipped since they only factor as ``1 x n``.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if repeats == 1:
        log.warning("--repeats 1 gives no variance estimate; timings may be noisy")
    rng = make_rng(seed)
    rows = []
    for n in grid:
        if is_prime(n):
            log.warning("skipping prime n=%d: no balanced factorization", n)
            continue
        f = factorize(n)
        plan = KronPlan(random_orthogonal(f.n1, rng), random_orthogonal(f.n2, rng))
        x = rng.standard_normal((tokens, n))
        m, s = _time(lambda: fused_apply_batch(x, plan), repeats)
        rows.append(BenchRow("fused", n, f.n1, f.n2, tokens, m, s))
        if dense:
            r = plan.dense()
            m, s = _time(lambda: dense_apply_batch(x, r), repeats)
            rows.append(BenchRow("dense", n, f.n1, f.n2, tokens, m, s))
            del r
    return rows


def fit_exponent(ns, times) -> float:
    """Least-squares slope of ``log(time)`` against ``log(n)``."""
    ns = np.asarray(ns, dtype=np.float64)
    if ns.size < 2:
        raise ValueError("need at least two sizes to fit an exponent")
    slope, _ = np.polyfit(np.log(ns), np.log(np.asarray(times, dtype=np.float64)), 1)
    return float(slope)


def exponents(rows: list[BenchRow]) -> dict:
    out = {}
    for method in ("fused", "dense"):
        sel = [r for r in rows if r.method == method]
        if len(sel) >= 2:
            out[method] = fit_exponent([r.n for r in sel], [r.mean_ns for r in sel])
    return out


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["method", "n", "n1", "n2", "T", "mean_ns", "stddev_ns"])
    for r in rows:
        wr.writerow([r.method, r.n, r.n1, r.n2, r.tokens, f"{r.mean_ns:.1f}", f"{r.stddev_ns:.1f}"])
    return buf.getvalue()
