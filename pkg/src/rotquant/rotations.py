"""Givens rotations, the closed-form smoothing angle and Hadamard matrices.

Everything uses the row-vector convention ``v -> v @ G``. For a rotation in
the plane ``(i, j)`` by ``theta`` this means::

    v_i' =  v_i cos(theta) + v_j sin(theta)
    v_j' = -v_i sin(theta) + v_j cos(theta)

and every other component is left untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg


class DegenerateAngleError(ValueError):
    """The closed-form angle is undefined because ``a + b == 0``."""


class UnsupportedDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class GivensRotation:
    i: int
    j: int
    theta: float

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError(f"rotation axes must differ, got i=j={self.i}")
        if self.i < 0 or self.j < 0:
            raise ValueError(f"negative axis index in ({self.i}, {self.j})")

    def inverse(self) -> "GivensRotation":
        return GivensRotation(self.i, self.j, -self.theta)

    def matrix(self, n: int) -> np.ndarray:
        if max(self.i, self.j) >= n:
            raise IndexError(f"axes ({self.i}, {self.j}) out of range for n={n}")
        g = np.eye(n)
        c, s = math.cos(self.theta), math.sin(self.theta)
        g[self.i, self.i] = c
        g[self.j, self.j] = c
        g[self.j, self.i] = s
        g[self.i, self.j] = -s
        return g


def apply_givens(v, g: GivensRotation) -> np.ndarray:
    """Return ``v @ G(i, j; theta)`` for a vector or a batch of row vectors."""
    out = np.array(v, dtype=np.float64, copy=True)
    n = out.shape[-1]
    if g.i >= n or g.j >= n:
        raise IndexError(f"axes ({g.i}, {g.j}) out of range for length {n}")
    _rotate_inplace(out, g.i, g.j, math.cos(g.theta), math.sin(g.theta))
    return out


def _rotate_inplace(x: np.ndarray, i: int, j: int, c: float, s: float) -> None:
    xi = x[..., i].copy()
    xj = x[..., j]
    x[..., i] = c * xi + s * xj
    x[..., j] = -s * xi + c * xj


class GivensChain:
    """An ordered product ``G_0 G_1 ... G_{k-1}`` applied left to right.

    Stored as flat arrays so long chains stay cheap to build and apply.
    """

    __slots__ = ("i", "j", "theta")

    def __init__(self, i, j, theta):
        self.i = np.asarray(i, dtype=np.int64).copy()
        self.j = np.asarray(j, dtype=np.int64).copy()
        self.theta = np.asarray(theta, dtype=np.float64).copy()
        if not (self.i.shape == self.j.shape == self.theta.shape) or self.i.ndim != 1:
            raise ValueError("i, j, theta must be 1-D arrays of equal length")
        if np.any(self.i == self.j):
            raise ValueError("rotation axes must differ")
        for arr in (self.i, self.j, self.theta):
            arr.setflags(write=False)

    @classmethod
    def from_rotations(cls, rotations) -> "GivensChain":
        rotations = list(rotations)
        return cls(
            [g.i for g in rotations], [g.j for g in rotations], [g.theta for g in rotations]
        )

    def __len__(self) -> int:
        return len(self.theta)

    def __iter__(self):
        for i, j, t in zip(self.i.tolist(), self.j.tolist(), self.theta.tolist()):
            yield GivensRotation(i, j, t)

    def __eq__(self, other):
        if not isinstance(other, GivensChain):
            return NotImplemented
        return (
            np.array_equal(self.i, other.i)
            and np.array_equal(self.j, other.j)
            and np.array_equal(self.theta, other.theta)
        )

    def __repr__(self):
        return f"GivensChain(len={len(self)})"

    def max_axis(self) -> int:
        if len(self) == 0:
            return -1
        return int(max(self.i.max(), self.j.max()))

    def inverse(self) -> "GivensChain":
        """Reversed order, negated angles."""
        return GivensChain(self.i[::-1], self.j[::-1], -self.theta[::-1])

    def then(self, other: "GivensChain") -> "GivensChain":
        return GivensChain(
            np.concatenate([self.i, other.i]),
            np.concatenate([self.j, other.j]),
            np.concatenate([self.theta, other.theta]),
        )

    def apply(self, x) -> np.ndarray:
        """Apply the chain to a vector or to every row of a matrix."""
        out = np.array(x, dtype=np.float64, copy=True)
        if self.max_axis() >= out.shape[-1]:
            raise IndexError(
                f"chain touches axis {self.max_axis()} but input has length {out.shape[-1]}"
            )
        cos = np.cos(self.theta).tolist()
        sin = np.sin(self.theta).tolist()
        ii = self.i.tolist()
        jj = self.j.tolist()
        if out.ndim == 1:
            # scalar loop beats per-element numpy indexing for single vectors
            buf = out.tolist()
            for i, j, c, s in zip(ii, jj, cos, sin):
                a, b = buf[i], buf[j]
                buf[i] = c * a + s * b
                buf[j] = -s * a + c * b
            return np.asarray(buf, dtype=np.float64)
        # rotate columns of the transposed copy so each update is contiguous
        t = np.ascontiguousarray(out.reshape(-1, out.shape[-1]).T)
        for i, j, c, s in zip(ii, jj, cos, sin):
            a = t[i].copy()
            b = t[j]
            t[i] = c * a + s * b
            b *= c
            b -= s * a
        return np.ascontiguousarray(t.T).reshape(out.shape)

    def matrix(self, n: int) -> np.ndarray:
        """Materialize the n x n orthogonal matrix (row-vector convention)."""
        return self.apply(np.eye(n))


def optimal_smoothing_angle(a: float, b: float) -> float:
    """Angle minimizing ``max(|x1|, |x2|)`` for ``(x1, x2) = (a, b) @ G(theta)``.

    ``theta = arctan((b - a) / (a + b))``; both rotated components then equal
    ``sign(a + b) * sqrt((a^2 + b^2) / 2)``.

    Raises:
        DegenerateAngleError: if ``a + b == 0`` (including ``a == b == 0``).
    """
    a = float(a)
    b = float(b)
    if a + b == 0.0:
        raise DegenerateAngleError(f"a + b == 0 for (a, b) = ({a}, {b})")
    return math.atan((b - a) / (a + b))


def smoothing_angle(a: float, b: float) -> float:
    """:func:`optimal_smoothing_angle` with the degenerate cases filled in.

    For ``a == -b != 0`` the arctan argument diverges; its limit ``pi/2``
    maps ``(a, -a)`` to ``(-a, -a)``, which is balanced. ``(0, 0)`` gets 0.
    """
    try:
        return optimal_smoothing_angle(a, b)
    except DegenerateAngleError:
        if a == 0.0 and b == 0.0:
            return 0.0
        return math.pi / 2


def map_to_axis(v) -> GivensChain:
    """Chain of ``n - 1`` rotations sending ``v`` to ``(||v||, 0, ..., 0)``.

    Rotation ``k`` acts in the plane ``(0, k)`` and folds component ``k`` into
    the running norm held in component 0.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError(f"expected a non-empty vector, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError("vector contains NaN or Inf")
    if not np.any(v):
        raise ValueError("cannot map the zero vector to an axis")
    n = v.size
    thetas = np.empty(n - 1)
    head = float(v[0])
    vals = v.tolist()
    for k in range(1, n):
        t = math.atan2(vals[k], head)
        thetas[k - 1] = t
        head = math.hypot(head, vals[k])
    return GivensChain(np.zeros(n - 1, dtype=np.int64), np.arange(1, n), thetas)


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def hadamard(n: int) -> np.ndarray:
    """Normalized Sylvester Hadamard matrix (entries +-1/sqrt(n))."""
    if not is_power_of_two(n):
        raise UnsupportedDimensionError(
            f"Sylvester Hadamard needs a power-of-two size, got {n}"
        )
    return scipy.linalg.hadamard(n, dtype=np.float64) / math.sqrt(n)
