import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adaptdiv.core import BudgetLedger, make_rng
from adaptdiv.optimizers import (
    BoState,
    SearchDistribution,
    avo_run,
    bo_run,
    expected_improvement,
    gp_fit,
    matern32,
    matern32_matrix,
    propose_next,
    vo_gradient,
)
from oracle_values import MATERN_UNIT


def dense_posterior(gp, xs):
    """Textbook GP equations with explicit inverses, no Cholesky."""
    K = np.array([[matern32(a, b, gp.length, gp.variance) for b in gp.x] for a in gp.x])
    K += gp.noise * np.eye(len(gp.x))
    ks = np.array([[matern32(a, b, gp.length, gp.variance) for b in gp.x] for a in xs])
    Kinv = np.linalg.inv(K)
    ys = (gp.y - gp.y_mean) / gp.y_scale
    mean = ks @ Kinv @ ys
    var = gp.variance - np.einsum("ij,jk,ik->i", ks, Kinv, ks)
    return gp.y_mean + gp.y_scale * mean, gp.y_scale**2 * np.maximum(var, 0.0)


class TestMatern:
    def test_zero_distance(self):
        assert matern32([1.0, 2.0], [1.0, 2.0], 0.3, 2.5) == 2.5

    def test_unit_distance(self):
        assert matern32([0.0], [1.0], 1.0) == pytest.approx(MATERN_UNIT, abs=1e-15)

    def test_decays_monotonically(self):
        vals = [matern32([0.0], [r], 1.0) for r in np.linspace(0, 30, 200)]
        assert all(b < a for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-20

    def test_matrix_agrees(self):
        rng = make_rng(0)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        M = matern32_matrix(a, b, 0.7, 1.3)
        for i in range(4):
            for j in range(5):
                assert M[i, j] == pytest.approx(matern32(a[i], b[j], 0.7, 1.3), rel=1e-13)

    def test_bad_length(self):
        with pytest.raises(ValueError):
            matern32([0.0], [1.0], 0.0)


class TestGp:
    def test_duplicate_points_interpolate(self):
        gp = gp_fit([[0.2], [0.2]], [1.5, 1.5])
        assert gp.predict([[0.2]])[0][0] == pytest.approx(1.5, abs=1e-8)

    def test_smooth_function_interpolated(self):
        x = np.linspace(-1, 1, 5)
        y = np.sin(2 * x)
        gp = gp_fit(x, y)
        # the 1e-6 noise floor leaves a few 1e-6 of slack at the data
        np.testing.assert_allclose(gp.predict(x[:, None])[0], y, atol=1e-5)
        np.testing.assert_allclose(gp.predict(x[:, None])[0], dense_posterior(gp, x[:, None])[0], atol=1e-8)

    def test_constant_targets(self):
        gp = gp_fit(np.linspace(0, 1, 6), np.full(6, 3.0))
        mean, _ = gp.predict(np.linspace(-1, 2, 30)[:, None])
        np.testing.assert_allclose(mean, 3.0, atol=1e-6)

    def test_length_in_range(self):
        rng = make_rng(1)
        x = rng.uniform(size=(8, 2))
        gp = gp_fit(x, rng.normal(size=8))
        assert 1e-3 <= gp.length <= 1e3

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            gp_fit([[0.0]], [1.0])

    @given(st.integers(2, 20), st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_matches_dense_solve(self, n, d, seed):
        rng = make_rng(seed)
        x = rng.uniform(-1, 1, (n, d))
        y = np.cos(3 * x[:, 0]) + rng.normal(0, 0.1, n)
        gp = gp_fit(x, y)
        xs = rng.uniform(-1, 1, (10, d))
        m, v = gp.predict(xs)
        dm, dv = dense_posterior(gp, xs)
        assert np.max(np.abs(m - dm)) <= 1e-8
        assert np.max(np.abs(v - dv)) <= 1e-8


class TestExpectedImprovement:
    def test_zero_variance(self):
        ei = expected_improvement(np.array([0.0, 0.5, -0.5]), np.zeros(3), 0.0)
        np.testing.assert_array_equal(ei, [0.0, 0.0, 0.5])

    @given(st.floats(-5, 5), st.floats(0, 10), st.floats(-5, 5))
    def test_nonnegative(self, mean, var, best):
        assert expected_improvement(np.array([mean]), np.array([var]), best)[0] >= 0

    def test_flat_acquisition_falls_back_to_uniform(self):
        gp = gp_fit(np.linspace(0, 1, 5), np.zeros(5))
        state = BoState(np.array([[0.0, 1.0]]), make_rng(0))
        psi = propose_next(state, gp)
        assert 0.0 <= psi[0] <= 1.0
        assert expected_improvement(*gp.predict([psi]), 0.0)[0] == 0.0

    def test_proposal_in_basin(self):
        x = np.array([-0.9, -0.5, 0.0, 0.15, 0.3, 0.45, 0.9])
        y = (x - 0.3) ** 2
        gp = gp_fit(x, y)
        grid = np.linspace(-1, 1, 20001)[:, None]
        target = grid[np.argmax(expected_improvement(*gp.predict(grid), y.min()))][0]
        psi = propose_next(BoState(np.array([[-1.0, 1.0]]), make_rng(3)), gp)
        assert abs(psi[0] - target) < 0.2


def quadratic(psi):
    return float((psi[0] - 0.3) ** 2)


class TestBoRun:
    def test_quadratic(self):
        hist = bo_run(quadratic, [[-1.0, 1.0]], 30, BudgetLedger(), make_rng(0))
        best = min(hist, key=lambda h: h.value)
        assert abs(best.psi[0] - 0.3) <= 0.02

    def test_init_only(self):
        hist = bo_run(quadratic, [[-1.0, 1.0]], 0, BudgetLedger(), make_rng(0))
        assert len(hist) == 5

    def test_deterministic(self):
        a = bo_run(quadratic, [[-1.0, 1.0]], 8, BudgetLedger(), make_rng(4))
        b = bo_run(quadratic, [[-1.0, 1.0]], 8, BudgetLedger(), make_rng(4))
        assert [h.psi.tolist() for h in a] == [h.psi.tolist() for h in b]

    def test_shift_invariant(self):
        a = bo_run(quadratic, [[-1.0, 1.0]], 8, BudgetLedger(), make_rng(5))
        b = bo_run(lambda p: quadratic(p) + 7.0, [[-1.0, 1.0]], 8, BudgetLedger(), make_rng(5))
        np.testing.assert_allclose([h.psi for h in a], [h.psi for h in b], atol=1e-9)

    def test_proposals_inside_bounds(self):
        hist = bo_run(lambda p: float(np.sum(p**2)), [[0.0, 1.0], [2.0, 3.0]], 6, BudgetLedger(), make_rng(6))
        pts = np.array([h.psi for h in hist])
        assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 0] <= 1)
        assert np.all(pts[:, 1] >= 2) and np.all(pts[:, 1] <= 3)

    def test_budget_stops_run(self):
        ledger = BudgetLedger(limit=35)

        def charged(psi):
            ledger.record("q", 10)
            return quadratic(psi)

        hist = bo_run(charged, [[-1.0, 1.0]], 10, ledger, make_rng(0))
        assert len(hist) == 3
        assert [h.cumulative_samples for h in hist] == [10, 20, 30]


class TestVoGradient:
    def test_constant_values(self):
        dist = SearchDistribution(np.zeros(2), np.zeros(2))
        psis = make_rng(0).normal(size=(16, 2))
        gm, gs = vo_gradient(np.full(16, 3.0), psis, dist)
        assert np.all(gm == 0) and np.all(gs == 0)

    def test_linear_mean_gradient(self):
        dist = SearchDistribution(np.array([0.4]), np.array([0.0]))
        psis = dist.sample(100_000, make_rng(1))
        gm, _ = vo_gradient(psis[:, 0], psis, dist)
        assert gm[0] == pytest.approx(1.0, abs=0.02)

    def test_quadratic_against_smoothed_objective(self):
        mu, log_std, a = 0.7, math.log(0.5), -0.2

        def smoothed(m, ls):
            return (m - a) ** 2 + math.exp(2 * ls)

        h = 1e-5
        fd = np.array([
            (smoothed(mu + h, log_std) - smoothed(mu - h, log_std)) / (2 * h),
            (smoothed(mu, log_std + h) - smoothed(mu, log_std - h)) / (2 * h),
        ])
        dist = SearchDistribution(np.array([mu]), np.array([log_std]))
        psis = dist.sample(100_000, make_rng(2))
        gm, gs = vo_gradient((psis[:, 0] - a) ** 2, psis, dist)
        est = np.array([gm[0], gs[0]])
        assert np.max(np.abs(est - fd) / np.abs(fd)) <= 0.05

    def test_unbiased_on_linear(self):
        dist = SearchDistribution(np.array([0.0, 1.0]), np.array([0.0, -0.5]))
        slope = np.array([2.0, -1.0])
        rng = make_rng(3)
        reps = np.array([vo_gradient(p @ slope, p, dist)[0] for p in (dist.sample(16, rng) for _ in range(200))])
        se = reps.std(axis=0, ddof=1) / math.sqrt(len(reps))
        assert np.all(np.abs(reps.mean(axis=0) - slope) <= 3 * se)

    def test_needs_two(self):
        dist = SearchDistribution(np.zeros(1), np.zeros(1))
        with pytest.raises(ValueError):
            vo_gradient([1.0], [[0.0]], dist)


class TestAvoRun:
    def test_flat_objective_keeps_mean(self):
        init = SearchDistribution(np.array([0.75, 0.75, 0.75]), np.full(3, -1.0))
        traj = avo_run(lambda psis, rng: (np.zeros(len(psis)), 0.0), init, 5, BudgetLedger(), make_rng(0))
        assert len(traj) == 6
        for step in traj:
            np.testing.assert_array_equal(step.mean, init.mean)

    def test_moves_toward_minimum_and_is_deterministic(self):
        def div(psis, rng):
            v = np.sum(psis**2, axis=1)
            return v, float(v.mean())

        init = SearchDistribution(np.array([0.75, 0.75]), np.full(2, math.log(0.25)))
        a = avo_run(div, init, 300, BudgetLedger(), make_rng(1), adam_lr=1e-2)
        b = avo_run(div, init, 300, BudgetLedger(), make_rng(1), adam_lr=1e-2)
        assert np.linalg.norm(a[-1].mean) < 0.3
        assert all(np.array_equal(s.mean, t.mean) for s, t in zip(a, b))

    def test_stops_on_budget(self):
        ledger = BudgetLedger(limit=50)

        def div(psis, rng):
            ledger.record("q", 16)
            return np.sum(psis**2, axis=1), 0.0

        init = SearchDistribution(np.zeros(1), np.zeros(1))
        traj = avo_run(div, init, 100, ledger, make_rng(0), bounds=[[-1.0, 1.0]])
        assert len(traj) == 4 and traj[-1].cumulative_samples == 48
