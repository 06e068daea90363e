"""Balanced dimension factorization and fused ``R1 (x) R2`` application.

For a row vector ``v`` of length ``n1 * n2`` reshaped row-major to
``V`` (n1 x n2)::

    v @ kron(R1, R2) == (R1.T @ V @ R2).ravel()

which costs ``O(n1 n2 (n1 + n2))`` instead of ``O(n^2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rotations import is_power_of_two
from .tensor import ShapeError, as_matrix, orthogonality_error


@dataclass(frozen=True)
class FactorPair:
    n1: int
    n2: int
    hadamard_ok: bool = True

    @property
    def n(self) -> int:
        return self.n1 * self.n2

    @property
    def degenerate(self) -> bool:
        return self.n1 == 1


def divisor_pairs(n: int) -> list[tuple[int, int]]:
    pairs = []
    for d in range(1, math.isqrt(n) + 1):
        if n % d == 0:
            pairs.append((d, n // d))
    return pairs


def factorize(n: int) -> FactorPair:
    """Most balanced ``n = n1 * n2`` (``n1 <= n2``) whose ``n2`` is a power of two.

    ``n2`` is the side that carries the Hadamard matrix. When no divisor pair
    has a power-of-two ``n2`` the most balanced pair is returned with
    ``hadamard_ok=False``. Prime ``n`` yields ``(1, n)``.
    """
    if n < 2:
        raise ValueError(f"cannot factorize n={n}; need n >= 2")
    pairs = divisor_pairs(n)
    eligible = [p for p in pairs if is_power_of_two(p[1])]
    if eligible:
        n1, n2 = min(eligible, key=lambda p: p[1] - p[0])
        return FactorPair(n1, n2, hadamard_ok=True)
    n1, n2 = min(pairs, key=lambda p: p[1] - p[0])
    return FactorPair(n1, n2, hadamard_ok=False)


@dataclass(frozen=True)
class KronPlan:
    r1: np.ndarray
    r2: np.ndarray

    def __post_init__(self):
        for name in ("r1", "r2"):
            m = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ShapeError(f"{name} must be square, got {m.shape}")
            object.__setattr__(self, name, m)

    @property
    def factors(self) -> FactorPair:
        return FactorPair(self.r1.shape[0], self.r2.shape[0])

    @property
    def n(self) -> int:
        return self.r1.shape[0] * self.r2.shape[0]

    def orthogonality_error(self) -> float:
        return max(orthogonality_error(self.r1), orthogonality_error(self.r2))

    def transpose(self) -> "KronPlan":
        return KronPlan(self.r1.T, self.r2.T)

    def dense(self) -> np.ndarray:
        return np.kron(self.r1, self.r2)


def fused_apply(v, plan: KronPlan) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    if v.size != plan.n:
        raise ShapeError(f"vector length {v.size} != n1*n2 = {plan.n}")
    n1, n2 = plan.r1.shape[0], plan.r2.shape[0]
    return (plan.r1.T @ v.reshape(n1, n2) @ plan.r2).ravel()


def fused_apply_batch(x, plan: KronPlan) -> np.ndarray:
    """Row-wise :func:`fused_apply` for ``x`` of shape (T, n1*n2)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {x.shape}")
    if x.shape[1] != plan.n:
        raise ShapeError(f"width {x.shape[1]} != n1*n2 = {plan.n}")
    t = x.shape[0]
    n1, n2 = plan.r1.shape[0], plan.r2.shape[0]
    # mode-2: one (T*n1, n2) @ (n2, n2) GEMM
    y = (x.reshape(t * n1, n2) @ plan.r2).reshape(t, n1, n2)
    # mode-1: contract axis 1 with R1, as one (T*n2, n1) @ (n1, n1) GEMM
    y = np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(t * n2, n1) @ plan.r1
    return np.ascontiguousarray(y.reshape(t, n2, n1).transpose(0, 2, 1)).reshape(t, n1 * n2)


def dense_apply_batch(x, r: np.ndarray) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != r.shape[0]:
        raise ShapeError(f"width {x.shape[1]} != rotation size {r.shape[0]}")
    return x @ r


def mode_view(x, factors: FactorPair, mode: int) -> np.ndarray:
    """Fibers of each row's ``n1 x n2`` reshape as rows of a 2-D matrix.

    ``mode=1`` gives the length-``n1`` column fibers, shape (T*n2, n1);
    ``mode=2`` gives the length-``n2`` row fibers, shape (T*n1, n2).
    """
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[0]
    cube = x.reshape(t, factors.n1, factors.n2)
    if mode == 1:
        return np.ascontiguousarray(cube.transpose(0, 2, 1)).reshape(t * factors.n2, factors.n1)
    if mode == 2:
        return cube.reshape(t * factors.n1, factors.n2).copy()
    raise ValueError(f"mode must be 1 or 2, got {mode}")
