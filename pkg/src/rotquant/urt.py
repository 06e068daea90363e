"""Uniformity rotation: map a representative activation profile onto a flat
grid of equal norm using two Givens chains.

With ``R_map`` sending the profile ``v`` to ``||v|| e_1`` and ``R'_map``
sending the target ``u`` to the same point, ``R = R_map R'_map^T`` satisfies
``v R = u``. Both chains have ``n - 1`` rotations so applying the plan costs
O(n) per row. Only ``v`` itself is guaranteed to land on the flat grid; other
rows are merely rotated (norm preserved).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rotations import GivensChain, map_to_axis
from .tensor import as_matrix


@dataclass(frozen=True)
class UniformTarget:
    values: np.ndarray
    norm: float


def make_uniform_target(n: int, norm: float, rng: np.random.Generator | None = None) -> UniformTarget:
    """Equispaced grid ``-1 + 2(k + 0.5)/n``, shuffled by ``rng``, rescaled to ``norm``.

    Passing ``rng=None`` keeps the grid in ascending order.
    """
    if n < 2:
        raise ValueError(f"target length must be >= 2, got {n}")
    if not norm > 0:
        raise ValueError(f"target norm must be positive, got {norm}")
    grid = -1.0 + 2.0 * (np.arange(n) + 0.5) / n
    if rng is not None:
        grid = grid[rng.permutation(n)]
    grid_norm = float(np.linalg.norm(grid))
    if grid_norm != norm:
        grid = grid * (norm / grid_norm)
    return UniformTarget(values=grid, norm=float(norm))


@dataclass(frozen=True)
class UrtPlan:
    forward_chain: GivensChain
    inverse_chain: GivensChain
    n: int
    target: UniformTarget

    @property
    def chain(self) -> GivensChain:
        return self.forward_chain.then(self.inverse_chain)

    def __len__(self) -> int:
        return len(self.forward_chain) + len(self.inverse_chain)

    def apply(self, x) -> np.ndarray:
        return self.inverse_chain.apply(self.forward_chain.apply(x))

    def apply_inverse(self, x) -> np.ndarray:
        return self.forward_chain.inverse().apply(self.inverse_chain.inverse().apply(x))

    def matrix(self) -> np.ndarray:
        return self.apply(np.eye(self.n))


def build_urt(v, target: UniformTarget | None = None, rng: np.random.Generator | None = None) -> UrtPlan:
    """Rotation plan carrying ``v`` onto a uniform target of the same norm.

    If ``target`` is omitted one is built with :func:`make_uniform_target`
    from ``rng`` (ascending grid if ``rng`` is also None).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"profile must be 1-D, got shape {v.shape}")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("cannot build a uniformity rotation for the zero vector")
    if target is None:
        target = make_uniform_target(v.size, norm, rng)
    elif target.values.shape != v.shape:
        raise ValueError(f"target length {target.values.size} != profile length {v.size}")
    forward = map_to_axis(v)
    backward = map_to_axis(target.values).inverse()
    return UrtPlan(forward_chain=forward, inverse_chain=backward, n=v.size, target=target)


def representative_profile(x, mode: str = "extreme") -> np.ndarray:
    """Per-channel summary row of ``x`` (T x n).

    ``mode="extreme"`` takes, for each channel, the signed value at the token
    where ``|x|`` is largest (first token on ties). ``mode="median"`` takes
    the per-channel median.
    """
    x = as_matrix(x, "activations")
    if x.shape[0] < 1:
        raise ValueError("need at least one token")
    if mode == "extreme":
        rows = np.argmax(np.abs(x), axis=0)
        return x[rows, np.arange(x.shape[1])].copy()
    if mode == "median":
        return np.median(x, axis=0)
    raise ValueError(f"unknown profile mode {mode!r}")


def kurtosis(v) -> float:
    """Plain (non-excess) kurtosis ``E[(v - mean)^4] / var^2``."""
    v = np.asarray(v, dtype=np.float64).ravel()
    d = v - v.mean()
    var = float(np.mean(d * d))
    if var == 0.0:
        return 0.0
    return float(np.mean(d**4) / var**2)

