"""Small-n invariant checks for every module, runnable from the CLI.

Each check returns a measured error that must not exceed its tolerance.
``inject`` names a check whose tolerance is forced negative so the failure
path can be exercised.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import art, kron, pathology, pipeline, quant, rotations, tensor, urt

INJECT_ENV = "RQ_SELFTEST_INJECT"


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.value)) and self.value <= self.tol


def _tensor_roundtrip(rng):
    m = rng.standard_normal((7, 5))
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "m.rqt")
        tensor.write_tensor(p, m)
        back = tensor.read_tensor(p)
    return float(np.abs(back - m).max())


def _random_orthogonal(rng):
    return tensor.orthogonality_error(tensor.random_orthogonal(33, rng))


def _smoothing_angle(rng):
    worst = 0.0
    for a, b in rng.uniform(-100, 100, size=(200, 2)):
        th = rotations.smoothing_angle(a, b)
        x = rotations.apply_givens(np.array([a, b]), rotations.GivensRotation(0, 1, th))
        target = math.sqrt((a * a + b * b) / 2)
        worst = max(worst, abs(np.abs(x).max() - target) / target)
    return worst


def _map_to_axis(rng):
    v = rng.standard_normal(19)
    out = rotations.map_to_axis(v).apply(v)
    return float(np.abs(out[1:]).max() + abs(out[0] - np.linalg.norm(v)))


def _urt_exact(rng):
    v = rng.standard_normal(17)
    plan = urt.build_urt(v, rng=rng)
    return float(np.abs(plan.apply(v) - plan.target.values).max())


def _art_balance(rng):
    x = pipeline.synthetic_activations(32, 16, rng)
    rep = art.detect_outlier(x)
    plan = art.build_art(rep, x, rng)
    y = plan.apply(x)
    a, b = plan.pair
    return abs(abs(y[plan.token, rep.outlier_dim]) - math.sqrt((a * a + b * b) / 2))


def _kron_fused(rng):
    p = kron.KronPlan(tensor.random_orthogonal(4, rng), tensor.random_orthogonal(8, rng))
    x = rng.standard_normal((5, 32))
    return float(np.abs(kron.fused_apply_batch(x, p) - x @ p.dense()).max())


def _quant_idempotent(rng):
    x = rng.standard_normal((8, 16))
    q = quant.fake_quant(x)
    return float(np.abs(quant.fake_quant(q) - q).max())


def _pipeline_invariance(rng):
    x = pipeline.synthetic_activations(32, 64, rng)
    w = pipeline.synthetic_weights(16, 64, rng)
    plan = pipeline.calibrate(x, seed=0)
    return pipeline.invariance_residual(x, w, plan)


def _cayley_orthogonal(rng):
    r = tensor.random_orthogonal(8, rng)
    g = rng.standard_normal((8, 8))
    return tensor.orthogonality_error(pathology.cayley_step(r, g, 0.5))


def _smooth_gradient(rng):
    x = rng.standard_normal((16, 8))
    w = rng.standard_normal((8, 8)) / 3
    pb = pathology.Problem(x, w, 4)
    r = tensor.random_orthogonal(8, rng)
    _, g = pb.loss_and_grad(r, quantize_in_loss=False)
    h = 1e-6
    fd = np.empty_like(r)
    for i in range(8):
        for j in range(8):
            e = np.zeros_like(r)
            e[i, j] = h
            fd[i, j] = (pb.loss_and_grad(r + e, False)[0] - pb.loss_and_grad(r - e, False)[0]) / (2 * h)
    return float(np.linalg.norm(fd - g) / np.linalg.norm(g))


CHECKS = {
    "tensor.roundtrip": (_tensor_roundtrip, 0.0),
    "tensor.random_orthogonal": (_random_orthogonal, 1e-12),
    "rotations.smoothing_angle": (_smoothing_angle, 1e-9),
    "rotations.map_to_axis": (_map_to_axis, 1e-10),
    "urt.exact_target": (_urt_exact, 1e-8),
    "art.pair_balance": (_art_balance, 1e-9),
    "kron.fused_vs_dense": (_kron_fused, 1e-9),
    "quant.idempotent": (_quant_idempotent, 1e-12),
    "pipeline.invariance": (_pipeline_invariance, 1e-5),
    "pathology.cayley_orthogonal": (_cayley_orthogonal, 1e-8),
    "pathology.smooth_gradient": (_smooth_gradient, 1e-5),
}


def run_selftest(seed: int = 0, inject: str | None = None) -> list[CheckResult]:
    if inject is None:
        inject = os.environ.get(INJECT_ENV) or None
    if inject is not None and inject not in CHECKS:
        raise KeyError(f"unknown check {inject!r}; choose from {sorted(CHECKS)}")
    results = []
    for k, (name, (fn, tol)) in enumerate(CHECKS.items()):
        rng = tensor.make_rng(seed + k)
        t0 = time.perf_counter()
        value = fn(rng)
        if name == inject:
            tol = -1.0
        results.append(CheckResult(name, float(value), tol, time.perf_counter() - t0))
    return results
