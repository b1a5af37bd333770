"""Outer black-box optimisers: GP Bayesian optimisation and Gaussian
variational optimisation with score-function gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize_scalar
from scipy.stats import norm

from .core import BudgetExhausted, BudgetLedger

SQRT3 = math.sqrt(3.0)
LENGTH_BOUNDS = (1e-3, 1e3)


class GpFitError(np.linalg.LinAlgError):
    pass


def matern32(x, y, length: float, variance: float = 1.0) -> float:
    if length <= 0:
        raise ValueError("length scale must be positive")
    r = float(np.linalg.norm(np.atleast_1d(x) - np.atleast_1d(y)))
    s = SQRT3 * r / length
    return variance * (1.0 + s) * math.exp(-s)


def matern32_matrix(a: np.ndarray, b: np.ndarray, length: float, variance: float) -> np.ndarray:
    d = np.sqrt(np.maximum(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1), 0.0))
    s = SQRT3 * d / length
    return variance * (1.0 + s) * np.exp(-s)


@dataclass
class GpModel:
    x: np.ndarray
    y: np.ndarray  # raw targets
    length: float
    variance: float
    noise: float
    y_mean: float
    y_scale: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)

    def predict(self, xs) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance of the latent function, raw units."""
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        k = matern32_matrix(xs, self.x, self.length, self.variance)
        mean = k @ self.alpha
        v = solve_triangular(self.chol, k.T, lower=True)
        var = np.maximum(self.variance - np.sum(v * v, axis=0), 0.0)
        return self.y_mean + self.y_scale * mean, self.y_scale**2 * var


def _factor(x, ys, length, variance, noise0=1e-6, max_noise=1e-1):
    noise = noise0
    K = matern32_matrix(x, x, length, variance)
    while True:
        try:
            chol = cholesky(K + noise * np.eye(len(x)), lower=True)
            return chol, noise
        except np.linalg.LinAlgError:
            noise *= 10.0
            if noise > max_noise:
                raise GpFitError("kernel matrix not positive definite even with jitter") from None


def log_marginal_likelihood(x, ys, length, variance) -> float:
    try:
        chol, _ = _factor(x, ys, length, variance)
    except GpFitError:
        return -np.inf
    a = cho_solve((chol, True), ys)
    return float(-0.5 * ys @ a - np.sum(np.log(np.diag(chol))) - 0.5 * len(ys) * math.log(2 * math.pi))


def gp_fit(points, values, grid_size: int = 61) -> GpModel:
    """Fit a Matern-3/2 GP to standardised targets.

    The length scale maximises the marginal likelihood on a log grid over
    [1e-3, 1e3], refined by a bounded scalar search between the neighbours
    of the best grid point.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(values, dtype=np.float64).ravel()
    if len(x) < 2 or len(x) != len(y):
        raise ValueError("need at least two points with one value each")
    y_mean = float(np.mean(y))
    y_scale = float(np.std(y))
    if not y_scale > 0:
        y_scale = 1.0
    ys = (y - y_mean) / y_scale
    variance = float(np.var(ys))
    lo, hi = np.log(LENGTH_BOUNDS)
    if variance > 0:
        grid = np.linspace(lo, hi, grid_size)
        ll = np.array([log_marginal_likelihood(x, ys, math.exp(g), variance) for g in grid])
        k = int(np.argmax(ll))
        a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid_size - 1)]
        res = minimize_scalar(
            lambda g: -log_marginal_likelihood(x, ys, math.exp(g), variance),
            bounds=(a, b), method="bounded", options={"xatol": 1e-4},
        )
        log_len = res.x if -res.fun >= ll[k] else grid[k]
    else:
        log_len = 0.0
    length = float(math.exp(log_len))
    chol, noise = _factor(x, ys, length, variance)
    alpha = cho_solve((chol, True), ys)
    return GpModel(x, y, length, variance, noise, y_mean, y_scale, chol, alpha)


def expected_improvement(mean, var, best) -> np.ndarray:
    """EI for minimisation; reduces to max(best - mean, 0) where var == 0."""
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.sqrt(np.maximum(var, 0.0))
    imp = best - mean
    out = np.maximum(imp, 0.0)
    pos = sd > 0
    with np.errstate(over="ignore"):
        # tiny sd gives huge |z|; the pdf then underflows to 0 as it should
        z = imp[pos] / sd[pos]
        out[pos] = imp[pos] * norm.cdf(z) + sd[pos] * norm.pdf(z)
    return np.maximum(out, 0.0)


@dataclass
class BoState:
    bounds: np.ndarray  # (d, 2)
    rng: np.random.Generator
    n_candidates: int = 2048
    n_refine: int = 64
    n_init: int = 5
    xs: list = field(default_factory=list)
    ys: list = field(default_factory=list)

    def uniform(self, n: int) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return lo + (hi - lo) * self.rng.random((n, len(lo)))


def propose_next(state: BoState, gp: GpModel) -> np.ndarray:
    """Maximise EI over uniform candidates, then perturb around the top ones.

    If EI is zero everywhere a uniform random point is returned.
    """
    lo, hi = state.bounds[:, 0], state.bounds[:, 1]
    best = float(np.min(gp.y))
    cand = state.uniform(state.n_candidates)
    ei = expected_improvement(*gp.predict(cand), best)
    top = cand[np.argsort(-ei, kind="stable")[:8]]
    width = hi - lo
    local = np.repeat(top, state.n_refine // len(top), axis=0)
    local = np.clip(local + 0.02 * width * state.rng.standard_normal(local.shape), lo, hi)
    cand = np.concatenate([cand, local])
    ei = np.concatenate([ei, expected_improvement(*gp.predict(local), best)])
    fallback = state.uniform(1)[0]
    k = int(np.argmax(ei))
    if not ei[k] > 0:
        return fallback
    return cand[k]


@dataclass
class HistoryRow:
    iteration: int
    psi: np.ndarray
    value: float
    cumulative_samples: int


def bo_run(objective: Callable[[np.ndarray], float], bounds, n_iters: int, ledger: BudgetLedger,
           rng: np.random.Generator, n_init: int = 5, state: BoState | None = None) -> list[HistoryRow]:
    """Five uniform points, then fit / propose / evaluate for n_iters rounds.

    Stops early, keeping completed evaluations, when the ledger budget runs
    out in the middle of an objective call.
    """
    bounds = np.atleast_2d(np.asarray(bounds, dtype=np.float64))
    if state is None:
        state = BoState(bounds, rng, n_init=n_init)
    history: list[HistoryRow] = []

    def evaluate(psi) -> bool:
        try:
            v = float(objective(psi))
        except BudgetExhausted:
            return False
        state.xs.append(np.array(psi, dtype=np.float64))
        state.ys.append(v)
        history.append(HistoryRow(len(history), np.array(psi, dtype=np.float64), v, ledger.total))
        return True

    # draw all initial points up front so they do not depend on outcomes
    for psi in state.uniform(state.n_init):
        if not evaluate(psi):
            return history
    for _ in range(n_iters):
        gp = gp_fit(np.array(state.xs), np.array(state.ys))
        if not evaluate(propose_next(state, gp)):
            break
    return history


# ---------------------------------------------------------------------------
# variational optimisation


@dataclass
class SearchDistribution:
    mean: np.ndarray
    log_std: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal((k, len(self.mean)))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mean, self.log_std])

    @classmethod
    def from_flat(cls, phi: np.ndarray) -> "SearchDistribution":
        d = len(phi) // 2
        return cls(phi[:d].copy(), phi[d:].copy())


def vo_gradient(d_values, psis, dist: SearchDistribution) -> tuple[np.ndarray, np.ndarray]:
    """Score-function gradient of E_q[d] w.r.t. (mean, log_std), mean baseline.

    The sum is divided by K - 1: the baseline includes each draw's own value,
    and dividing by K would shrink the expectation by (K - 1) / K.
    """
    d = np.asarray(d_values, dtype=np.float64).ravel()
    psis = np.atleast_2d(np.asarray(psis, dtype=np.float64))
    if psis.shape[0] != len(d) and psis.shape[1] == len(d):
        psis = psis.T
    if len(d) < 2:
        raise ValueError("score-function gradient needs at least two samples")
    if not np.all(np.isfinite(d)):
        raise ValueError("objective values must be finite")
    centred = d - d.mean()
    eps = (psis - dist.mean) / dist.std
    k = len(d) - 1
    g_mean = np.sum(centred[:, None] * eps / dist.std, axis=0) / k
    g_log_std = np.sum(centred[:, None] * (eps**2 - 1.0), axis=0) / k
    return g_mean, g_log_std


@dataclass
class AvoStep:
    step: int
    mean: np.ndarray
    log_std: np.ndarray
    value: float
    cumulative_samples: int


def adam_update(phi, grad, state: dict, lr: float, b1=0.9, b2=0.999, eps=1e-8) -> np.ndarray:
    m = state.get("m", np.zeros_like(phi))
    v = state.get("v", np.zeros_like(phi))
    t = state.get("t", 0) + 1
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    state.update(m=m, v=v, t=t)
    return phi - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)


def avo_run(divergence: Callable, init: SearchDistribution, n_steps: int, ledger: BudgetLedger,
            rng: np.random.Generator, adam_lr: float = 1e-2, k: int = 16,
            bounds=None) -> list[AvoStep]:
    """Adam on the search distribution, one discriminator per step.

    ``divergence(psis, rng)`` trains against the mixture over ``psis`` and
    returns ``(per_psi_values, overall_value)``. Parameter draws are clipped
    into ``bounds``. Stops early, keeping the trajectory, on budget exhaustion.
    """
    dist = SearchDistribution(np.array(init.mean, dtype=np.float64), np.array(init.log_std, dtype=np.float64))
    phi = dist.flat()
    opt: dict = {}
    traj = [AvoStep(0, dist.mean.copy(), dist.log_std.copy(), math.nan, ledger.total)]
    for step in range(1, n_steps + 1):
        psis = dist.sample(k, rng)
        if bounds is not None:
            b = np.asarray(bounds, dtype=np.float64)
            psis = np.clip(psis, b[:, 0], b[:, 1])
        try:
            values, overall = divergence(psis, rng)
        except BudgetExhausted:
            break
        g_mean, g_log_std = vo_gradient(values, psis, dist)
        grad = np.concatenate([g_mean, g_log_std])
        if np.any(grad != 0.0):
            phi = adam_update(phi, grad, opt, adam_lr)
        dist = SearchDistribution.from_flat(phi)
        traj.append(AvoStep(step, dist.mean.copy(), dist.log_std.copy(), float(overall), ledger.total))
    return traj
