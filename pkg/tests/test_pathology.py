import csv
import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rotquant.pathology import (
    Problem,
    SimConfig,
    boundary_gradient_ratios,
    boundary_spike,
    cayley_step,
    find_boundary,
    make_problem,
    riemannian_grad,
    run_simulation,
    summarize,
    trace_to_csv,
)
from rotquant.quant import QuantConfig, quantize
from rotquant.tensor import make_rng, orthogonality_error, random_orthogonal


def fd_grad(pb, r, h=1e-6, quantize_in_loss=False):
    g = np.empty_like(r)
    for i in range(r.shape[0]):
        for j in range(r.shape[1]):
            e = np.zeros_like(r)
            e[i, j] = h
            g[i, j] = (pb.loss_and_grad(r + e, quantize_in_loss)[0] - pb.loss_and_grad(r - e, quantize_in_loss)[0]) / (2 * h)
    return g


def unit_skew(rng, n):
    a = rng.standard_normal((n, n))
    k = (a - a.T) / 2
    return k / np.linalg.norm(k)


class TestConfig:
    def test_invalid(self):
        with pytest.raises(ValueError):
            SimConfig(steps=0)
        with pytest.raises(ValueError):
            SimConfig(lr=0)
        with pytest.raises(ValueError):
            SimConfig(lr_schedule="cosine")

    def test_linear_decay_positive(self):
        cfg = SimConfig(steps=50, lr=2.0)
        lrs = [cfg.lr_at(s) for s in range(cfg.steps)]
        assert lrs[0] == 2.0 and min(lrs) > 0 and all(b < a for a, b in zip(lrs, lrs[1:]))


class TestLossAndGrad:
    def test_smooth_matches_finite_differences(self, rng):
        x = rng.standard_normal((16, 8))
        w = rng.standard_normal((8, 8)) / 3
        pb = Problem(x, w, 4)
        r = random_orthogonal(8, rng)
        _, g = pb.loss_and_grad(r, quantize_in_loss=False)
        fd = fd_grad(pb, r)
        assert np.abs(fd - g).max() / np.abs(g).max() <= 1e-5

    def test_constructed_minimum(self, rng):
        # x on the step grid makes F(X) = X, so L(I) = 0
        d = 0.5
        x = rng.integers(-3, 4, size=(12, 6)).astype(float) * d
        x[:, 0] = 3 * d  # every token spans +-3 steps
        pb = Problem(x, rng.standard_normal((5, 6)), 4, smooth_steps=np.full(12, d))
        loss, g = pb.loss_and_grad(np.eye(6), quantize_in_loss=False)
        assert loss <= 1e-28
        assert np.linalg.norm(g) <= 1e-10

    def test_ste_uses_rtn(self, rng):
        x = rng.standard_normal((8, 6))
        w = rng.standard_normal((4, 6))
        pb = Problem(x, w, 4)
        r = random_orthogonal(6, rng)
        loss, _ = pb.loss_and_grad(r, True)
        q = quantize(x @ r, QuantConfig(4, granularity="per-row"))
        fy = q.codes * q.scales[:, None]
        ref = np.sum((fy @ r.T @ w.T - x @ w.T) ** 2) / np.sum((x @ w.T) ** 2)
        assert loss == pytest.approx(ref, rel=1e-12)

    def test_ste_gradient_formula(self, rng):
        """STE gradient equals the exact gradient with F(XR) frozen and dF = I."""
        x = rng.standard_normal((8, 6))
        w = rng.standard_normal((4, 6))
        pb = Problem(x, w, 4)
        r = random_orthogonal(6, rng)
        _, g = pb.loss_and_grad(r, True)
        q = quantize(x @ r, QuantConfig(4, granularity="per-row"))
        fy = q.codes * q.scales[:, None]
        z = np.sum((x @ w.T) ** 2)

        def surrogate(rr):
            # straight-through: F(XR) -> XR + (fy - XR_frozen), scales held fixed
            y = x @ rr + (fy - x @ r)
            return np.sum((y @ rr.T @ w.T - x @ w.T) ** 2) / z

        h = 1e-6
        fd = np.empty_like(r)
        for i in range(6):
            for j in range(6):
                e = np.zeros_like(r)
                e[i, j] = h
                fd[i, j] = (surrogate(r + e) - surrogate(r - e)) / (2 * h)
        assert np.abs(fd - g).max() / np.abs(g).max() <= 1e-5

    def test_riemannian_grad_tangent(self, rng):
        r = random_orthogonal(7, rng)
        g = riemannian_grad(r, rng.standard_normal((7, 7)))
        m = r.T @ g
        assert np.abs(m + m.T).max() <= 1e-12


class TestCayley:
    def test_zero_grad(self, rng):
        r = random_orthogonal(6, rng)
        assert np.allclose(cayley_step(r, np.zeros((6, 6)), 0.3), r, atol=1e-15)

    @given(st.integers(2, 24), st.floats(1e-4, 50.0), st.integers(0, 2**32 - 1))
    def test_orthogonal(self, n, lr, seed):
        r_ = make_rng(seed)
        r = random_orthogonal(n, r_)
        out = cayley_step(r, r_.standard_normal((n, n)), lr)
        assert np.abs(out.T @ out - np.eye(n)).max() <= 1e-8

    def test_descent_on_quadratic(self, rng):
        # convex quadratic in R: ||R - T||_F^2 with T orthogonal
        n = 6
        target = random_orthogonal(n, rng)
        r = random_orthogonal(n, rng)
        losses = []
        for _ in range(10):
            losses.append(float(np.sum((r - target) ** 2)))
            r = cayley_step(r, 2 * (r - target), 1e-3)
        assert all(b <= a + 1e-14 for a, b in zip(losses, losses[1:]))

    def test_singular_retry(self, monkeypatch, rng, caplog):
        calls = []
        real = np.linalg.solve

        def flaky(a, b):
            calls.append(1)
            if len(calls) == 1:
                raise np.linalg.LinAlgError("singular")
            return real(a, b)

        monkeypatch.setattr(np.linalg, "solve", flaky)
        r = random_orthogonal(4, rng)
        out = cayley_step(r, rng.standard_normal((4, 4)), 1.0)
        assert len(calls) == 2 and orthogonality_error(out) <= 1e-10
        assert "retrying" in caplog.text

    def test_singular_twice_errors(self, monkeypatch, rng):
        def always(a, b):
            raise np.linalg.LinAlgError("singular")

        monkeypatch.setattr(np.linalg, "solve", always)
        with pytest.raises(np.linalg.LinAlgError):
            cayley_step(np.eye(3), np.ones((3, 3)), 1.0)


class TestSimulation:
    def test_trace_and_orthogonality(self):
        cfg = SimConfig(steps=200, seed=1)
        trace = run_simulation(cfg)
        assert len(trace) == 200 and [t.step for t in trace] == list(range(200))
        assert all(np.isfinite([t.loss, t.riemannian_grad_norm]).all() for t in trace)

    def test_reorthogonalize_on_drift(self, monkeypatch, caplog):
        import rotquant.pathology as p

        monkeypatch.setattr(p, "ORTHO_TOL", -1.0)  # every step counts as drift
        caplog.set_level("INFO")
        run_simulation(SimConfig(steps=3))
        assert "re-orthogonalizing" in caplog.text

    def test_smooth_converges(self):
        s = summarize(run_simulation(SimConfig(quantize_in_loss=False)))
        assert s["decay_ratio"] <= 0.01

    def test_ste_floor(self):
        s = summarize(run_simulation(SimConfig()))
        assert s["floor_ratio"] >= 0.1

    def test_csv(self):
        trace = run_simulation(SimConfig(steps=5))
        text = trace_to_csv(trace)
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["step", "loss", "grad_norm"] and len(rows) == 6
        assert float(rows[3][1]) == trace[2].loss

    def test_deterministic(self):
        a = trace_to_csv(run_simulation(SimConfig(steps=50, seed=3)))
        b = trace_to_csv(run_simulation(SimConfig(steps=50, seed=3)))
        assert a == b


class TestBoundary:
    def test_boundary_located(self):
        pb, r0 = make_problem(SimConfig(seed=0))
        k = unit_skew(make_rng(7), 16)
        t, tok, ch, dy = find_boundary(pb, r0, k)
        assert t > 0 and dy > 0
        from rotquant.pathology import _tangent_curve

        curve = _tangent_curve(r0, k)
        before = quantize(pb.x @ curve(t - 1e-9 / dy), pb.cfg).codes
        after = quantize(pb.x @ curve(t + 1e-9 / dy), pb.cfg).codes
        assert not np.array_equal(before, after)

    @pytest.mark.parametrize("seed", range(4))
    def test_ratio_grows_as_width_shrinks(self, seed):
        pb, r0 = make_problem(SimConfig(seed=seed))
        ratios = boundary_gradient_ratios(pb, r0, unit_skew(make_rng(100 + seed), 16), [1e-2, 1e-3, 1e-4])
        assert ratios[0] < ratios[1] < ratios[2]

    def test_smooth_ratio_bounded(self):
        pb, r0 = make_problem(SimConfig(seed=0))
        k = unit_skew(make_rng(100), 16)
        ratios = boundary_gradient_ratios(pb, r0, k, [1e-2, 1e-3, 1e-4], quantize_in_loss=False)
        assert max(ratios) / min(ratios) <= 1.5

    @pytest.mark.parametrize("seed", range(4))
    def test_boundary_spike(self, seed):
        pb, r0 = make_problem(SimConfig(seed=seed))
        rng = make_rng(200 + seed)
        jump, baseline = boundary_spike(pb, r0, unit_skew(rng, 16), rng)
        assert jump >= baseline
