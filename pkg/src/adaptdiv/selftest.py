"""Fast invariant checks behind ``adaptdiv selftest``.

Each check returns a short deterministic detail string; nothing here depends
on wall-clock time, so the output CSV is reproducible.
"""

from __future__ import annotations

import math

import numpy as np

from . import gbdt, nn, simulators
from .core import LN2, BudgetLedger, CapacityFunction, cross_entropy, make_rng
from .divergence import estimate_ad_grid, stub_family, GapCriterion
from .optimizers import expected_improvement, gp_fit, matern32, matern32_matrix


def check_constant_half():
    rng = make_rng(1)
    xp, xq = rng.normal(size=(50, 3)), rng.normal(size=(70, 3))
    v = cross_entropy(lambda x: np.full(len(x), 0.5), xp, xq)
    return v == LN2, f"L = {v:.17g}"


def check_capacity_order():
    for kind in ("linear", "logarithmic"):
        c = CapacityFunction(kind, 0.25, 100)
        vals = [c(i) for i in range(101)]
        if vals[0] != 0.0 or any(b <= a for a, b in zip(vals, vals[1:])):
            return False, f"{kind} not strictly increasing"
    return True, "linear and logarithmic strictly increasing on 0..100"


def check_ledger():
    counts = [3, 0, 17, 5, 11]
    a, b = BudgetLedger(), BudgetLedger()
    for n in counts:
        a.record("x", n)
    for n in reversed(counts):
        b.record("x", n)
    return a.total == b.total == sum(counts), f"total = {a.total}"


def check_seed_determinism():
    task = simulators.XorTask()
    a = simulators.sample(task, (0.3,), 100, make_rng(7), None)
    b = simulators.sample(task, (0.3,), 100, make_rng(7), None)
    return bool(np.array_equal(a, b)), "same seed, same draws"


def check_stop_index():
    rng = make_rng(2)
    cap = CapacityFunction("linear", 0.25, 100)
    for _ in range(100):
        losses = LN2 * np.cumprod(np.r_[1.0, rng.uniform(0.8, 1.0, 100)])
        expect = next((i for i in range(101) if losses[i] <= cap(i) * LN2), 100)
        if gbdt.stop_index(losses, cap)[0] != expect:
            return False, "mismatch against the linear scan"
    i, hit = gbdt.stop_index(LN2 * 0.9 ** np.arange(101), cap)
    return i == 26 and hit, f"0.9^i stub stops at {i}"


def check_matern():
    v = matern32(np.zeros(1), np.ones(1), 1.0)
    return abs(v - (1 + math.sqrt(3)) * math.exp(-math.sqrt(3))) < 1e-15, f"k(r=1) = {v:.12f}"


def check_gp_dense():
    rng = make_rng(3)
    x = rng.uniform(-1, 1, (12, 2))
    y = np.sin(3 * x[:, 0]) + x[:, 1] ** 2
    gp = gp_fit(x, y)
    xs = rng.uniform(-1, 1, (30, 2))
    ys = (y - gp.y_mean) / gp.y_scale
    K = matern32_matrix(x, x, gp.length, gp.variance) + gp.noise * np.eye(len(x))
    ks = matern32_matrix(xs, x, gp.length, gp.variance)
    mean = gp.y_mean + gp.y_scale * ks @ np.linalg.solve(K, ys)
    var = gp.y_scale**2 * (gp.variance - np.einsum("ij,ji->i", ks, np.linalg.solve(K, ks.T)))
    m, v = gp.predict(xs)
    err = max(np.max(np.abs(m - mean)), np.max(np.abs(v - np.maximum(var, 0.0))))
    return err <= 1e-8, f"max deviation {err:.1e}" if err > 1e-12 else "max deviation < 1e-12"


def check_ei():
    ei = expected_improvement(np.array([0.0, 1.0, -1.0]), np.zeros(3), 0.0)
    return bool(np.all(ei >= 0) and ei[0] == 0 and ei[1] == 0 and ei[2] == 1.0), "EI with zero variance"


def check_nn_gradient():
    rng = make_rng(4)
    worst = 0.0
    for _ in range(5):
        net = nn.Mlp.init(3, 4, rng)
        xp, xq = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        theta = net.flat()
        g = nn.backward(net, xp, xq, beta=10.0)
        fd = np.empty_like(theta)
        for j in range(len(theta)):
            e = np.zeros_like(theta)
            e[j] = 1e-5
            fd[j] = (nn.objective(net.with_flat(theta + e), xp, xq, beta=10.0)
                     - nn.objective(net.with_flat(theta - e), xp, xq, beta=10.0)) / 2e-5
        worst = max(worst, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)))
    return worst <= 1e-4, "relative error <= 1e-4" if worst <= 1e-4 else f"relative error {worst:.2e}"


def check_stub_ad():
    fam = stub_family(lambda a: a * LN2 / 2)
    crit = GapCriterion(tolerance=1e-2, min_n=1, max_n=2)
    est = estimate_ad_grid(fam, lambda n, r: np.zeros((n, 1)), lambda n, r: np.zeros((n, 1)),
                           0.05, crit, None, make_rng(0))
    ok = abs(est.alpha_used - 0.7) < 1e-12 and abs(est.value - 0.35 * LN2) < 1e-12
    return ok, f"alpha = {est.alpha_used:.2f}"


def check_boost_monotone():
    rng = make_rng(5)
    xp = rng.normal(-0.5, 1.0, (200, 2))
    xq = rng.normal(0.5, 1.0, (200, 2))
    _, losses = gbdt.fit_ensemble(xp, xq, gbdt.GbdtConfig(n_trees=30))
    rise = max(b - a for a, b in zip(losses, losses[1:]))
    return rise <= 1e-6, "training loss nonincreasing"


def check_rotation():
    task = simulators.XorTask()
    a = simulators.rotate(task.generate((0.7,), 50, make_rng(6)), -0.7)
    b = task.base(50, make_rng(6))
    err = float(np.max(np.abs(a - b)))
    return err < 1e-12, "rotation equivariance"


CHECKS = {
    "constant scorer loss is ln 2": check_constant_half,
    "capacity functions increase": check_capacity_order,
    "ledger total is order invariant": check_ledger,
    "seeded draws repeat": check_seed_determinism,
    "stopping index matches linear scan": check_stop_index,
    "matern 3/2 at unit distance": check_matern,
    "GP matches dense solve": check_gp_dense,
    "expected improvement": check_ei,
    "network gradient with R1": check_nn_gradient,
    "grid AD on stub family": check_stub_ad,
    "boosting loss monotone": check_boost_monotone,
    "xor rotation": check_rotation,
}


def run_all() -> list[tuple[str, str, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, "PASS" if ok else "FAIL", detail))
    return out
