"""Alignment rotation: find the channel carrying the largest activation, pair
it with the quietest channel, and balance the two with the closed-form Givens
angle. The remaining ``n - 2`` channels are mixed by a seeded random
orthogonal block.

The plan is stored in factored form and acts on a row vector as::

    y = x[perm];  y[:2] <- y[:2] @ G(theta);  y[2:] <- y[2:] @ O;  x'[perm] = y

i.e. ``R = P^T blockdiag(G, O) P`` with ``P`` the gather permutation that puts
the outlier channel first and the anchor channel second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rotations import GivensRotation, smoothing_angle
from .tensor import as_matrix, random_orthogonal


@dataclass(frozen=True)
class OutlierReport:
    outlier_dim: int
    anchor_dim: int
    outlier_score: float
    anchor_score: float


def channel_max_abs(x: np.ndarray) -> np.ndarray:
    return np.abs(x).max(axis=0)


def detect_outlier(x) -> OutlierReport:
    """Channel with the largest max-|x| and, among the others, the smallest.

    Ties go to the lowest channel index.
    """
    x = as_matrix(x, "activations")
    if x.shape[1] < 2:
        raise ValueError(f"need at least 2 channels, got {x.shape[1]}")
    if x.shape[0] < 1:
        raise ValueError("need at least one token")
    score = channel_max_abs(x)
    i = int(np.argmax(score))
    masked = score.copy()
    masked[i] = np.inf
    j = int(np.argmin(masked))
    return OutlierReport(i, j, float(score[i]), float(score[j]))


@dataclass(frozen=True)
class ArtPlan:
    permutation: np.ndarray
    givens: GivensRotation
    bulk_block: np.ndarray
    n: int
    report: OutlierReport | None = None
    pair: tuple[float, float] = (0.0, 0.0)
    token: int = 0
    _inverse_perm: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(self.n)):
            raise ValueError("permutation is not a permutation of range(n)")
        if self.bulk_block.shape != (self.n - 2, self.n - 2):
            raise ValueError(
                f"bulk block must be {(self.n - 2, self.n - 2)}, got {self.bulk_block.shape}"
            )
        if (self.givens.i, self.givens.j) != (0, 1):
            raise ValueError("ART Givens rotation must act on permuted axes (0, 1)")
        object.__setattr__(self, "permutation", perm)
        object.__setattr__(self, "_inverse_perm", np.argsort(perm))

    @property
    def theta(self) -> float:
        return self.givens.theta

    def apply(self, x) -> np.ndarray:
        return self._apply(x, inverse=False)

    def apply_inverse(self, x) -> np.ndarray:
        return self._apply(x, inverse=True)

    def _apply(self, x, inverse: bool) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n:
            raise ValueError(f"input width {x.shape[-1]} != plan dimension {self.n}")
        y = x[..., self.permutation]
        c, s = math.cos(self.givens.theta), math.sin(self.givens.theta)
        if inverse:
            s = -s
        a = y[..., 0].copy()
        b = y[..., 1].copy()
        y[..., 0] = c * a + s * b
        y[..., 1] = -s * a + c * b
        if self.n > 2:
            block = self.bulk_block.T if inverse else self.bulk_block
            y[..., 2:] = y[..., 2:] @ block
        return y[..., self._inverse_perm]

    def matrix(self) -> np.ndarray:
        return self.apply(np.eye(self.n))


def build_art(
    report: OutlierReport,
    x,
    rng: np.random.Generator | None = None,
    identity_bulk: bool = False,
) -> ArtPlan:
    """Closed-form alignment rotation for activations ``x`` (T x n).

    The angle is computed from the pair ``(a, b)`` read at the token where the
    outlier channel peaks: ``a`` is the outlier value, ``b`` the anchor
    channel's value at that same token.
    """
    x = as_matrix(x, "activations")
    n = x.shape[1]
    i, j = report.outlier_dim, report.anchor_dim
    if i == j or not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"invalid outlier/anchor pair ({i}, {j}) for width {n}")
    token = int(np.argmax(np.abs(x[:, i])))
    a = float(x[token, i])
    b = float(x[token, j])
    theta = smoothing_angle(a, b)
    rest = [k for k in range(n) if k != i and k != j]
    perm = np.array([i, j, *rest], dtype=np.int64)
    if identity_bulk or n == 2:
        bulk = np.eye(n - 2)
    else:
        if rng is None:
            raise ValueError("a random bulk block needs an rng (or identity_bulk=True)")
        bulk = random_orthogonal(n - 2, rng)
    return ArtPlan(
        permutation=perm,
        givens=GivensRotation(0, 1, theta),
        bulk_block=bulk,
        n=n,
        report=report,
        pair=(a, b),
        token=token,
    )


@dataclass
class ArtPasses:
    plans: list[ArtPlan]
    max_abs: list[float]
    rotated: np.ndarray

    def apply(self, x) -> np.ndarray:
        for p in self.plans:
            x = p.apply(x)
        return x

    def matrix(self) -> np.ndarray:
        n = self.plans[0].n
        return self.apply(np.eye(n))


def art_iterate(
    x, k: int, rng: np.random.Generator | None = None, identity_bulk: bool = False
) -> ArtPasses:
    """Run ``k`` detect -> build -> apply passes.

    ``max_abs`` holds the global max-|x| before the first pass followed by the
    value after each pass.
    """
    if k < 1:
        raise ValueError(f"need at least one pass, got k={k}")
    cur = as_matrix(x, "activations")
    plans = []
    trace = [float(np.abs(cur).max())]
    for _ in range(k):
        plan = build_art(detect_outlier(cur), cur, rng, identity_bulk=identity_bulk)
        cur = plan.apply(cur)
        plans.append(plan)
        trace.append(float(np.abs(cur).max()))
    return ArtPasses(plans=plans, max_abs=trace, rotated=cur)
