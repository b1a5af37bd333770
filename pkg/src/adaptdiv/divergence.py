"""Divergence estimators built on trained discriminators.

A *trainer* is any callable ``trainer(xp, xq, xp_valid, xq_valid, rng)``
returning a :class:`Fit`. Estimators here only decide how many samples to
draw and which capacities to probe; the classifiers live in ``gbdt`` and
``nn``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import numpy as np

from .core import LN2, BudgetExhausted, BudgetLedger, as_dataset, spawn


@dataclass
class Fit:
    value: float
    alpha: float
    train_loss: float
    valid_loss: float
    model: Any = None


@dataclass
class Probe:
    alpha: float
    train_loss: float
    valid_loss: float
    n: int
    value: float


@dataclass
class DivergenceEstimate:
    value: float
    alpha_used: float
    train_loss: float
    valid_loss: float
    samples_used: int
    n: int = 0
    probes: list[Probe] = field(default_factory=list)
    model: Any = None

    @property
    def gap(self) -> float:
        return abs(self.train_loss - self.valid_loss)


class Trainer(Protocol):
    def __call__(self, xp, xq, xp_valid, xq_valid, rng) -> Fit: ...


Sampler = Callable[[int, np.random.Generator], np.ndarray]


class GapNotReached(RuntimeError):
    def __init__(self, best_gap: float, n: int, tolerance: float):
        super().__init__(
            f"train/validation gap {best_gap:.4g} never reached tolerance "
            f"{tolerance:g} (largest n probed: {n})"
        )
        self.best_gap = best_gap
        self.n = n
        self.tolerance = tolerance


@dataclass(frozen=True)
class GapCriterion:
    tolerance: float = 1e-2
    min_n: int = 64
    max_n: int = 65536
    growth: str = "bisection"
    # bisection stops once the bracket is narrower than this fraction of n
    resolution: float = 0.125
    # "found": bill train + validation rows at the returned n only;
    # "all": bill every row the search draws
    charge: str = "all"

    def __post_init__(self):
        if not 0.0 < self.tolerance < LN2:
            raise ValueError("tolerance must lie in (0, ln 2)")
        if not 1 <= self.min_n < self.max_n:
            raise ValueError("need 1 <= min_n < max_n")
        if self.growth not in ("bisection", "doubling"):
            raise ValueError(f"unknown growth policy {self.growth!r}")
        if self.charge not in ("found", "all"):
            raise ValueError(f"unknown charging rule {self.charge!r}")


GBDT_CRITERION = GapCriterion(tolerance=1e-2, growth="bisection")
NN_CRITERION = GapCriterion(tolerance=5e-2, growth="doubling")


class GrowingSample:
    """A sample that is drawn lazily and only ever extended.

    Smaller requests are served as prefixes, so probing several sizes costs
    only the largest one.
    """

    def __init__(self, sampler: Sampler, rng, ledger: BudgetLedger | None, tag: str):
        self.sampler = sampler
        self.rng = rng
        self.ledger = ledger
        self.tag = tag
        self.rows: np.ndarray | None = None

    def __len__(self):
        return 0 if self.rows is None else len(self.rows)

    def take(self, n: int) -> np.ndarray:
        have = len(self)
        if n > have:
            extra = n - have
            if self.ledger is not None:
                self.ledger.record(self.tag, extra)
            new = as_dataset(self.sampler(extra, self.rng))
            self.rows = new if self.rows is None else np.concatenate([self.rows, new])
        return self.rows[:n]


def draw(sampler: Sampler, n: int, rng, ledger: BudgetLedger | None, tag: str) -> np.ndarray:
    if ledger is not None:
        ledger.record(tag, n)
    return as_dataset(sampler(n, rng))


def _probe_sizes_doubling(crit: GapCriterion):
    n = crit.min_n
    while n < crit.max_n:
        yield n
        n *= 2
    yield crit.max_n


def min_training_size(
    trainer: Trainer,
    p: Sampler,
    q: Sampler,
    crit: GapCriterion,
    ledger: BudgetLedger | None,
    rng: np.random.Generator,
    alpha: float | None = None,
    p_ledger: BudgetLedger | None = None,
) -> tuple[int, DivergenceEstimate]:
    """Smallest probed n whose trained discriminator has |train - valid| <= tol.

    Training and validation sets have the same size n per distribution.
    Sizes grow by doubling; with ``growth="bisection"`` the last bracket is
    then bisected. All probes reuse prefixes of the same growing pools.

    ``ledger`` pays for Q (generator) rows and ``p_ledger`` for P rows. With
    ``crit.charge == "found"`` each side is billed 2 n for the returned n;
    with ``"all"`` every drawn row is billed as it is drawn. In both modes a
    probe that could not be paid for raises ``BudgetExhausted``.
    """
    rp, rq, rpv, rqv, rfit = spawn(rng, 5)
    billed_now = crit.charge == "all"
    pools = (
        GrowingSample(p, rp, p_ledger if billed_now else None, "p_train"),
        GrowingSample(q, rq, ledger if billed_now else None, "q_train"),
        GrowingSample(p, rpv, p_ledger if billed_now else None, "p_valid"),
        GrowingSample(q, rqv, ledger if billed_now else None, "q_valid"),
    )
    probes: list[Probe] = []
    fits: dict[int, Fit] = {}
    fit_rngs = iter(spawn(rfit, 64))

    def affordable(n: int):
        for led in (ledger, p_ledger):
            if led is not None and led.limit is not None and 2 * n > led.remaining():
                raise BudgetExhausted(f"n={n} needs {2 * n} samples, {led.remaining()} left")

    def run(n: int) -> Fit:
        if not billed_now:
            affordable(n)
        xp, xq, xpv, xqv = (pool.take(n) for pool in pools)
        fit = trainer(xp, xq, xpv, xqv, next(fit_rngs))
        fits[n] = fit
        probes.append(
            Probe(fit.alpha if alpha is None else alpha, fit.train_loss, fit.valid_loss, n, fit.value)
        )
        return fit

    def ok(fit: Fit) -> bool:
        return abs(fit.train_loss - fit.valid_loss) <= crit.tolerance

    lo, hi = 0, None
    for n in _probe_sizes_doubling(crit):
        if ok(run(n)):
            hi = n
            break
        lo = n
    if hi is None:
        best = min(abs(f.train_loss - f.valid_loss) for f in fits.values())
        raise GapNotReached(best, crit.max_n, crit.tolerance)

    if crit.growth == "bisection" and lo > 0:
        while hi - lo > max(1, int(crit.resolution * hi)):
            mid = (lo + hi) // 2
            if ok(run(mid)):
                hi = mid
            else:
                lo = mid

    if billed_now:
        used = sum(len(pool) for pool in pools)
    else:
        for led, tag in ((p_ledger, "p"), (ledger, "q")):
            if led is not None:
                led.record(f"{tag}_train", hi).record(f"{tag}_valid", hi)
        used = 4 * hi
    fit = fits[hi]
    est = DivergenceEstimate(
        value=fit.value,
        alpha_used=fit.alpha if alpha is None else alpha,
        train_loss=fit.train_loss,
        valid_loss=fit.valid_loss,
        samples_used=used,
        n=hi,
        probes=probes,
        model=fit.model,
    )
    return hi, est


def estimate_jsd(
    trainer: Trainer,
    p: Sampler,
    q: Sampler,
    crit: GapCriterion,
    ledger: BudgetLedger | None,
    rng: np.random.Generator,
    p_ledger: BudgetLedger | None = None,
) -> DivergenceEstimate:
    """ln 2 minus the held-out loss of a full-capacity discriminator."""
    _, est = min_training_size(trainer, p, q, crit, ledger, rng, alpha=1.0, p_ledger=p_ledger)
    est.value = LN2 - est.valid_loss
    return est


# ---------------------------------------------------------------------------
# families and the grid-search adaptive divergence


@dataclass
class PseudoDivergenceFamily:
    """Indexed family of trainers; ``trainer_at(alpha)`` trains at capacity alpha.

    ``kind`` is one of ``model-restricted``, ``regularized`` or ``boosted``.
    """

    trainer_at: Callable[[float], Trainer]
    kind: str = "model-restricted"
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("model-restricted", "regularized", "boosted"):
            raise ValueError(f"unknown family kind {self.kind!r}")


def constant_trainer(value: float) -> Trainer:
    """Trainer whose discriminator reports a fixed divergence with zero gap."""

    def train(xp, xq, xpv, xqv, rng) -> Fit:
        loss = LN2 - value
        return Fit(value=value, alpha=math.nan, train_loss=loss, valid_loss=loss)

    return train


def stub_family(fn: Callable[[float], float], name: str = "stub") -> PseudoDivergenceFamily:
    """Family with an exact evaluator ``alpha -> D_alpha``; data is ignored."""
    return PseudoDivergenceFamily(lambda a: constant_trainer(fn(a)), kind="model-restricted", name=name)


def alpha_grid(eps: float) -> list[float]:
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    k = int(math.floor(1.0 / eps + 1e-9))
    grid = [i * eps for i in range(k + 1)]
    if grid[-1] < 1.0 - 1e-12:
        grid.append(1.0)
    else:
        grid[-1] = 1.0
    return grid


def estimate_ad_grid(
    family: PseudoDivergenceFamily,
    p: Sampler,
    q: Sampler,
    eps: float,
    crit: GapCriterion,
    ledger: BudgetLedger | None,
    rng: np.random.Generator,
    p_ledger: BudgetLedger | None = None,
) -> DivergenceEstimate:
    """Scan alpha = 0, eps, 2 eps, ... and stop at the first D_alpha >= (1 - alpha) ln 2.

    Every probe retrains from scratch on freshly drawn data. If no grid point
    qualifies the value at alpha = 1 is returned.
    """
    grid = alpha_grid(eps)
    probes: list[Probe] = []
    spent = 0
    est = None
    for alpha, sub in zip(grid, spawn(rng, len(grid))):
        n, est = min_training_size(family.trainer_at(alpha), p, q, crit, ledger, sub, alpha=alpha, p_ledger=p_ledger)
        spent += est.samples_used
        probes.append(Probe(alpha, est.train_loss, est.valid_loss, n, est.value))
        if est.value >= (1.0 - alpha) * LN2:
            break
    est.alpha_used = alpha
    est.samples_used = spent
    est.probes = probes
    return est
