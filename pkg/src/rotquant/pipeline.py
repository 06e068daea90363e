"""End-to-end single-pass rotation: calibrate, rotate, quantize, report.

The full rotation is ``R = R1 (x) R2`` on the row-major ``n1 x n2`` view of
each activation row. ``R1`` acts on the length-``n1`` column fibers and is
the alignment rotation followed by the first uniformity rotation; ``R2``
acts on the length-``n2`` row fibers and is the Hadamard matrix followed by
the second uniformity rotation. Calibration reads activations once and never
calls the quantizer.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import quant
from .art import ArtPlan, art_iterate, channel_max_abs
from .kron import FactorPair, KronPlan, factorize, fused_apply_batch, mode_view
from .quant import QuantConfig
from .rotations import hadamard
from .tensor import ShapeError, as_matrix, make_rng, random_orthogonal
from .urt import UrtPlan, build_urt, representative_profile

log = logging.getLogger(__name__)

MODES = ("identity", "hadamard", "art", "urt", "art+urt")
_MODE_PARTS = {
    "identity": (False, False, False),
    "hadamard": (True, False, False),
    "art": (True, True, False),
    "urt": (True, False, True),
    "art+urt": (True, True, True),
}


def synthetic_activations(
    t: int,
    n: int,
    rng: np.random.Generator,
    no_frac: float = 0.01,
    no_scale: float = 8.0,
    mo_frac: float = 0.001,
    mo_scale: float = 100.0,
) -> np.ndarray:
    """Gaussian bulk with normal outliers (whole channels scaled by
    ``no_scale``) and massive outliers (single entries scaled by ``mo_scale``).
    """
    x = rng.standard_normal((t, n))
    n_no = max(1, round(no_frac * n)) if no_frac > 0 else 0
    if n_no:
        x[:, rng.choice(n, size=n_no, replace=False)] *= no_scale
    n_mo = max(1, round(mo_frac * t * n)) if mo_frac > 0 else 0
    if n_mo:
        flat = rng.choice(t * n, size=n_mo, replace=False)
        x.reshape(-1)[flat] *= mo_scale
    return x


def synthetic_weights(c_out: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((c_out, n)) / np.sqrt(n)


@dataclass
class RotationPlan:
    """Factored rotation ``R = R1 (x) R2``.

    ``r1`` and ``r2`` are stored in the row-vector convention actually used
    to apply them: a column fiber ``f`` maps to ``f @ r1 = f A U1`` where
    ``A`` and ``U1`` are the alignment and uniformity rotations. Written in
    the column convention this is ``(U1^T A^T)^T``, hence ``transpose_left``.
    """

    factors: FactorPair
    mode: str
    art: list[ArtPlan] = field(default_factory=list)
    urt1: UrtPlan | None = None
    urt2: UrtPlan | None = None
    hadamard: bool = False
    right_fallback: np.ndarray | None = None
    transpose_left: bool = True
    r1: np.ndarray = None
    r2: np.ndarray = None

    @property
    def n(self) -> int:
        return self.factors.n

    @property
    def kron(self) -> KronPlan:
        return KronPlan(self.r1, self.r2)

    def matrix(self) -> np.ndarray:
        return np.kron(self.r1, self.r2)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n1": self.factors.n1,
            "n2": self.factors.n2,
            "hadamard": self.hadamard,
            "transpose_left": self.transpose_left,
            "art": [
                {
                    "permutation": p.permutation.tolist(),
                    "theta": p.theta,
                    "pair": list(p.pair),
                    "token": p.token,
                    "bulk_block": p.bulk_block.tolist(),
                }
                for p in self.art
            ],
            "urt1": _urt_dict(self.urt1),
            "urt2": _urt_dict(self.urt2),
            "r1": self.r1.tolist(),
            "r2": self.r2.tolist(),
        }

    def serialize(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()


def _urt_dict(p: UrtPlan | None):
    if p is None:
        return None
    return {"theta_forward": p.forward_chain.theta.tolist(), "theta_inverse": p.inverse_chain.theta.tolist(),
            "target": p.target.values.tolist()}


def identity_plan(n: int) -> RotationPlan:
    f = factorize(n)
    return RotationPlan(factors=f, mode="identity", r1=np.eye(f.n1), r2=np.eye(f.n2))


def calibrate(
    x,
    seed: int = 0,
    mode: str = "art+urt",
    art_passes: int = 1,
    profile: str = "extreme",
    identity_bulk: bool = False,
) -> RotationPlan:
    """Build the rotation for calibration activations ``x`` (T x n) in one pass."""
    if mode not in _MODE_PARTS:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    x = as_matrix(x, "activations")
    n = x.shape[1]
    if n < 4:
        raise ValueError(f"need n >= 4 to factor the rotation, got {n}")
    if not np.any(x):
        raise ValueError("calibration activations are all zero")
    factors = factorize(n)
    n1, n2 = factors.n1, factors.n2
    use_h, use_art, use_urt = _MODE_PARTS[mode]
    art_seed, urt1_seed, urt2_seed, fb_seed = np.random.SeedSequence(seed).spawn(4)

    plan = RotationPlan(factors=factors, mode=mode, r1=np.eye(n1), r2=np.eye(n2))
    if mode == "identity":
        return plan

    if factors.hadamard_ok:
        plan.hadamard = use_h
        plan.r2 = hadamard(n2)
    else:
        log.warning("n=%d has no power-of-two factor n2; using a random orthogonal block instead of H", n)
        plan.right_fallback = random_orthogonal(n2, make_rng(fb_seed))
        plan.r2 = plan.right_fallback

    if use_art and n1 >= 2:
        passes = art_iterate(mode_view(x, factors, 1), art_passes, make_rng(art_seed), identity_bulk)
        plan.art = passes.plans
        plan.r1 = passes.matrix()

    if use_urt:
        y = fused_apply_batch(x, plan.kron)
        if n1 >= 2:
            v1 = representative_profile(mode_view(y, factors, 1), profile)
            if np.any(v1):
                plan.urt1 = build_urt(v1, rng=make_rng(urt1_seed))
                plan.r1 = plan.urt1.apply(plan.r1)
                y = fused_apply_batch(x, plan.kron)
        v2 = representative_profile(mode_view(y, factors, 2), profile)
        if np.any(v2):
            plan.urt2 = build_urt(v2, rng=make_rng(urt2_seed))
            plan.r2 = plan.urt2.apply(plan.r2)
    return plan


def _check_width(m: np.ndarray, plan: RotationPlan, what: str) -> None:
    if m.shape[1] != plan.n:
        raise ShapeError(f"{what} width {m.shape[1]} does not match rotation size {plan.n}")


def apply_to_activations(x, plan: RotationPlan) -> np.ndarray:
    """``X R``."""
    x = as_matrix(x, "activations")
    _check_width(x, plan, "activation")
    return fused_apply_batch(x, plan.kron)


def apply_to_weights(w, plan: RotationPlan) -> np.ndarray:
    """``W R`` for ``W`` of shape (C_out, n), i.e. ``(R^T W^T)^T``.

    Output channels are untouched; only the input dimension is rotated.
    """
    w = as_matrix(w, "weights")
    _check_width(w, plan, "weight")
    return fused_apply_batch(w, plan.kron)


def apply_inverse(y, plan: RotationPlan) -> np.ndarray:
    y = as_matrix(y)
    _check_width(y, plan, "input")
    return fused_apply_batch(y, plan.kron.transpose())


def invariance_residual(x, w, plan: RotationPlan) -> float:
    """``||(XR)(R^T W^T) - X W^T||_F / ||X W^T||_F``."""
    ref = as_matrix(x) @ as_matrix(w).T
    rot = apply_to_activations(x, plan) @ apply_to_weights(w, plan).T
    denom = float(np.linalg.norm(ref))
    num = float(np.linalg.norm(rot - ref))
    return num / denom if denom > 0 else num


def product_quant_mse(xr, wr, ref, act_cfg: QuantConfig, w_cfg: QuantConfig) -> float:
    """Mean squared error of ``Q(XR) Q(WR)^T`` against the exact ``X W^T``."""
    d = quant.fake_quant(xr, act_cfg) @ quant.fake_quant(wr, w_cfg).T - ref
    return float(np.mean(d * d))


def evaluate_mode(x, w, mode, seed, act_cfg, w_cfg, art_passes=1, profile="extreme", ref=None):
    t0 = time.perf_counter_ns()
    plan = calibrate(x, seed, mode=mode, art_passes=art_passes, profile=profile)
    t1 = time.perf_counter_ns()
    xr = apply_to_activations(x, plan)
    wr = apply_to_weights(w, plan)
    t2 = time.perf_counter_ns()
    if ref is None:
        ref = x @ w.T
    rot = xr @ wr.T
    res = {
        "product_mse": product_quant_mse(xr, wr, ref, act_cfg, w_cfg),
        "x_mse": quant.quant_mse(xr, act_cfg),
        "w_mse": quant.quant_mse(wr, w_cfg),
        "x_space_utilization": quant.space_utilization(xr, act_cfg),
        "w_space_utilization": quant.space_utilization(wr, w_cfg),
        "x_max_abs": float(np.abs(xr).max()),
        "channel_max_abs": channel_max_abs(xr).tolist(),
        "invariance_residual": float(np.linalg.norm(rot - ref) / max(np.linalg.norm(ref), 1e-300)),
        "plan_digest": plan.digest(),
    }
    return res, {"calibrate_ns": t1 - t0, "apply_ns": t2 - t1}


def run_single_pass(
    x,
    w,
    cfg: QuantConfig | None = None,
    seed: int = 0,
    modes=MODES,
    w_cfg: QuantConfig | None = None,
    art_passes: int = 1,
    profile: str = "extreme",
) -> dict:
    """Compare rotation modes on the quantized product ``Q(XR) Q(R^T W^T)``.

    Returns a JSON-ready report; ``timings_ns`` is kept separate from the
    numeric results so callers can drop it when they need stable bytes.
    """
    x = as_matrix(x, "activations")
    w = as_matrix(w, "weights")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"activations have width {x.shape[1]} but weights have {w.shape[1]}")
    act_cfg = cfg or quant.ACTIVATION_DEFAULT
    w_cfg = w_cfg or act_cfg.with_(granularity="per-row")
    bad = [m for m in modes if m not in _MODE_PARTS]
    if bad:
        raise ValueError(f"unknown modes {bad}; expected a subset of {MODES}")
    ref = x @ w.T
    report = {
        "shape": {"tokens": x.shape[0], "n": x.shape[1], "c_out": w.shape[0]},
        "factors": list(_factor_tuple(x.shape[1])),
        "config": {
            "bits": act_cfg.bits,
            "symmetric": act_cfg.symmetric,
            "act_granularity": act_cfg.granularity,
            "weight_granularity": w_cfg.granularity,
            "clip_ratio": act_cfg.clip_ratio,
            "seed": seed,
            "art_passes": art_passes,
            "profile": profile,
        },
        "baseline": {
            "x_mse": quant.quant_mse(x, act_cfg),
            "w_mse": quant.quant_mse(w, w_cfg),
            "x_space_utilization": quant.space_utilization(x, act_cfg),
            "x_max_abs": float(np.abs(x).max()),
            "channel_max_abs": channel_max_abs(x).tolist(),
        },
        "modes": {},
    }
    timings = {}
    for mode in modes:
        res, tm = evaluate_mode(x, w, mode, seed, act_cfg, w_cfg, art_passes, profile, ref)
        report["modes"][mode] = res
        timings[mode] = tm
    report["invariance_residual"] = max(r["invariance_residual"] for r in report["modes"].values())
    report["timings_ns"] = timings
    return report


def _factor_tuple(n: int):
    f = factorize(n)
    return f.n1, f.n2
