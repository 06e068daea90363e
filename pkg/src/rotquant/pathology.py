"""Cayley SGD on the orthogonal group with a quantized reconstruction loss.

The loss is ``L(R) = ||F(XR) R^T W^T - X W^T||_F^2 / ||X W^T||_F^2``.

* STE mode: ``F`` is RTN fake quantization with per-token scales recomputed
  every step but treated as constants; the rounding step passes the gradient
  through unchanged.
* Smooth mode: ``F(y) = y - (d / 2 pi) sin(2 pi y / d)`` with per-token steps
  ``d`` frozen at the initial rotation. This soft staircase has the same
  period as the quantization grid but a Lipschitz gradient, so it serves as
  the convergent control.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass

import numpy as np

from .quant import QuantConfig, quantize, dequantize
from .tensor import make_rng, orthogonality_error, random_orthogonal

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class SimConfig:
    n: int = 16
    tokens: int = 64
    c_out: int = 16
    steps: int = 2000
    lr: float = 20.0
    lr_schedule: str = "linear-decay"
    bits: int = 4
    quantize_in_loss: bool = True
    seed: int = 0
    activations: str = "gaussian"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in ("constant", "linear-decay"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.n < 2 or self.tokens < 1 or self.c_out < 1:
            raise ValueError("n >= 2, tokens >= 1 and c_out >= 1 required")
        if self.activations not in ("gaussian", "outliers"):
            raise ValueError(f"unknown activation family {self.activations!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr * (1.0 - step / self.steps)


@dataclass(frozen=True)
class TraceRecord:
    step: int
    loss: float
    riemannian_grad_norm: float


class Problem:
    """Fixed data for one simulation: activations, weights and smooth steps."""

    def __init__(self, x, w, bits: int = 4, smooth_steps=None):
        self.x = np.asarray(x, dtype=np.float64)
        self.w = np.asarray(w, dtype=np.float64)
        self.cfg = QuantConfig(bits=bits, granularity="per-row")
        self.ref = self.x @ self.w.T
        self.norm2 = float(np.sum(self.ref * self.ref))
        if smooth_steps is None:
            smooth_steps = self.token_steps(self.x)
        self.smooth_steps = np.asarray(smooth_steps, dtype=np.float64).reshape(-1, 1)

    def token_steps(self, y: np.ndarray) -> np.ndarray:
        return quantize(y, self.cfg).scales

    def loss_and_grad(self, r: np.ndarray, quantize_in_loss: bool = True):
        """Loss and Euclidean (STE or exact) gradient with respect to ``r``."""
        y = self.x @ r
        if quantize_in_loss:
            fy = dequantize(quantize(y, self.cfg))
            dfy = None
        else:
            d = self.smooth_steps
            phase = (2.0 * math.pi / d) * y
            fy = y - d / (2.0 * math.pi) * np.sin(phase)
            dfy = 1.0 - np.cos(phase)
        wr = self.w @ r
        e = fy @ wr.T - self.ref
        loss = float(np.sum(e * e)) / self.norm2
        back = e @ wr
        if dfy is not None:
            back = back * dfy
        grad = (2.0 / self.norm2) * (self.x.T @ back + self.w.T @ (e.T @ fy))
        return loss, grad


def make_problem(cfg: SimConfig) -> tuple[Problem, np.ndarray]:
    """Activations, weights and a random orthogonal starting point for ``cfg``.

    The default Gaussian activations keep the smooth control well
    conditioned; ``activations="outliers"`` uses the pipeline's synthetic
    outlier generator instead.
    """
    from .pipeline import synthetic_activations

    rng = make_rng(cfg.seed)
    if cfg.activations == "gaussian":
        x = rng.standard_normal((cfg.tokens, cfg.n))
    else:
        x = synthetic_activations(cfg.tokens, cfg.n, rng)
    w = rng.standard_normal((cfg.c_out, cfg.n)) / math.sqrt(cfg.n)
    r0 = random_orthogonal(cfg.n, rng)
    problem = Problem(x, w, cfg.bits, smooth_steps=None)
    problem.smooth_steps = problem.token_steps(x @ r0).reshape(-1, 1)
    return problem, r0


def riemannian_grad(r: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Projection of ``grad`` onto the tangent space at ``r``: ``r skew(r^T grad)``."""
    m = r.T @ grad
    return r @ (0.5 * (m - m.T))


def cayley_step(r: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """``r <- (I + lr/2 A)^-1 (I - lr/2 A) r`` with ``A = grad r^T - r grad^T``."""
    n = r.shape[0]
    a = grad @ r.T - r @ grad.T
    eye = np.eye(n)
    for attempt in range(2):
        try:
            return np.linalg.solve(eye + (lr / 2.0) * a, (eye - (lr / 2.0) * a) @ r)
        except np.linalg.LinAlgError:
            if attempt == 0:
                log.warning("singular Cayley system at lr=%g; retrying with lr/2", lr)
                lr = lr / 2.0
    raise np.linalg.LinAlgError(f"Cayley system singular even at lr={lr}")


def reorthogonalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def run_simulation(cfg: SimConfig, problem: Problem | None = None, r0=None) -> list[TraceRecord]:
    if problem is None:
        problem, default_r0 = make_problem(cfg)
        if r0 is None:
            r0 = default_r0
    if r0 is None:
        r0 = np.eye(cfg.n)
    r = np.array(r0, dtype=np.float64)
    trace = []
    for step in range(cfg.steps):
        loss, g = problem.loss_and_grad(r, cfg.quantize_in_loss)
        gnorm = float(np.linalg.norm(riemannian_grad(r, g)))
        trace.append(TraceRecord(step, loss, gnorm))
        r = cayley_step(r, g, cfg.lr_at(step))
        err = orthogonality_error(r)
        if err > ORTHO_TOL:
            log.info("step %d: orthogonality drift %.2e, re-orthogonalizing", step, err)
            r = reorthogonalize(r)
    return trace


def trace_to_csv(trace: list[TraceRecord]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["step", "loss", "grad_norm"])
    for rec in trace:
        wr.writerow([rec.step, repr(rec.loss), repr(rec.riemannian_grad_norm)])
    return buf.getvalue()


def summarize(trace: list[TraceRecord], window: int = 100) -> dict:
    """Decay and floor statistics of the gradient-norm trace.

    ``decay_ratio`` = mean of the last ``window`` norms / mean of the first
    ``window``. ``floor_ratio`` = mean over the final 20% / overall median.
    """
    g = np.array([r.riemannian_grad_norm for r in trace])
    losses = np.array([r.loss for r in trace])
    w = max(1, min(window, len(g)))
    tail = g[int(len(g) * 0.8):] if len(g) >= 5 else g
    median = float(np.median(g))
    first = float(g[:w].mean())
    return {
        "steps": len(g),
        "first_window_mean_grad": first,
        "last_window_mean_grad": float(g[-w:].mean()),
        "decay_ratio": float(g[-w:].mean() / first) if first > 0 else 0.0,
        "final20_mean_grad": float(tail.mean()),
        "median_grad": median,
        "floor_ratio": float(tail.mean() / median) if median > 0 else 0.0,
        "final_loss": float(losses[-1]),
        "min_loss": float(losses.min()),
        "loss_std_final20": float(losses[int(len(losses) * 0.8):].std()),
    }


def _tangent_curve(r0: np.ndarray, k: np.ndarray):
    """``t -> r0 expm(t k)`` for skew ``k`` via eigendecomposition."""
    evals, evecs = np.linalg.eig(k)
    inv = np.linalg.inv(evecs)

    def at(t: float) -> np.ndarray:
        e = (evecs * np.exp(t * evals)) @ inv
        return r0 @ e.real

    return at


def find_boundary(problem: Problem, r0: np.ndarray, k: np.ndarray, t_max: float = 0.5, samples: int = 2000):
    """Locate the first ``t`` in ``(0, t_max]`` where an RTN code changes
    along ``r0 expm(t k)``, refined by bisection.

    Returns ``(t*, token, channel, dy)`` where ``dy`` is the rate of change of
    the crossing coordinate measured in quantization steps per unit ``t``.
    """
    curve = _tangent_curve(r0, k)

    def codes(t):
        return quantize(problem.x @ curve(t), problem.cfg).codes

    c0 = codes(0.0)
    lo = 0.0
    hi = None
    for t in np.linspace(0.0, t_max, samples)[1:]:
        if not np.array_equal(codes(t), c0):
            hi = float(t)
            break
        lo = float(t)
    if hi is None:
        raise RuntimeError("no rounding boundary crossed along the curve")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if np.array_equal(codes(mid), c0):
            lo = mid
        else:
            hi = mid
    diff = np.argwhere(codes(hi) != c0)[0]
    tok, ch = int(diff[0]), int(diff[1])
    h = 1e-7
    y = lambda t: (problem.x @ curve(t))[tok, ch] / problem.token_steps(problem.x @ curve(t))[tok]
    dy = (y(hi + h) - y(hi - h)) / (2 * h)
    return 0.5 * (lo + hi), tok, ch, abs(dy)


def boundary_gradient_ratios(problem: Problem, r0: np.ndarray, k: np.ndarray, widths, quantize_in_loss=True):
    """Empirical Lipschitz ratio ``||g(R+) - g(R-)|| / ||R+ - R-||_F`` for
    straddles of the first rounding boundary along ``r0 expm(t k)``.

    ``widths`` are in quantization steps: a width ``w`` moves the crossing
    coordinate by about ``w`` steps between ``R-`` and ``R+``.
    """
    t0, _, _, dy = find_boundary(problem, r0, k)
    curve = _tangent_curve(r0, k)
    out = []
    for wdt in widths:
        dt = wdt / dy
        rm, rp = curve(t0 - dt / 2), curve(t0 + dt / 2)
        _, gm = problem.loss_and_grad(rm, quantize_in_loss)
        _, gp = problem.loss_and_grad(rp, quantize_in_loss)
        out.append(float(np.linalg.norm(gp - gm) / np.linalg.norm(rp - rm)))
    return out


def boundary_spike(problem: Problem, r0: np.ndarray, k: np.ndarray, rng, width: float = 1e-4, samples: int = 50):
    """Gradient jump across the first rounding boundary versus random pairs.

    Returns ``(jump, baseline)``: ``jump`` is ``||g(R+) - g(R-)||`` for a
    straddle of ``width`` quantization steps; ``baseline`` is the mean of the
    same quantity for random orthogonal ``R`` and random unit skew directions
    at equal separation ``||R+ - R-||_F``.
    """
    t0, _, _, dy = find_boundary(problem, r0, k)
    curve = _tangent_curve(r0, k)
    dt = width / dy
    rm, rp = curve(t0 - dt / 2), curve(t0 + dt / 2)
    jump = float(np.linalg.norm(problem.loss_and_grad(rp)[1] - problem.loss_and_grad(rm)[1]))
    sep = float(np.linalg.norm(rp - rm))
    n = r0.shape[0]
    diffs = []
    for _ in range(samples):
        r = random_orthogonal(n, rng)
        a = rng.standard_normal((n, n))
        kk = (a - a.T) / 2
        # ||R expm(s K) - R|| ~ s ||K|| for small s
        c = _tangent_curve(r, kk / np.linalg.norm(kk))
        g0 = problem.loss_and_grad(c(0.0))[1]
        g1 = problem.loss_and_grad(c(sep))[1]
        diffs.append(float(np.linalg.norm(g1 - g0)))
    return jump, float(np.mean(diffs))
