"""Shared numerics: the cross-entropy loss, capacity functions, RNG streams
and the generator-sample budget ledger."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

LN2 = math.log(2.0)
CLIP = 1e-7


class EmptySampleError(ValueError):
    pass


class BudgetExhausted(RuntimeError):
    """Raised when a draw would push the ledger past its limit."""


def as_dataset(xs) -> np.ndarray:
    """Validate a sample matrix: 2-D, at least one row, finite float64."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[:, None]
    if xs.ndim != 2:
        raise ValueError(f"expected a 2-D sample matrix, got shape {xs.shape}")
    if xs.shape[0] == 0:
        raise EmptySampleError("empty sample")
    if not np.all(np.isfinite(xs)):
        raise ValueError("sample contains non-finite entries")
    return xs


def _clipped_log_terms(sp: np.ndarray, sq: np.ndarray) -> float:
    sp = np.clip(sp, CLIP, 1.0 - CLIP)
    sq = np.clip(sq, CLIP, 1.0 - CLIP)
    return float(-0.5 * _mean(np.log(sp)) - 0.5 * _mean(np.log1p(-sq)))


def _mean(v: np.ndarray) -> float:
    # centred on the first entry so a constant array averages exactly
    return v[0] + np.mean(v - v[0])


def cross_entropy_scores(sp, sq) -> float:
    """Two-sided cross-entropy from precomputed scores f(x_P), f(x_Q)."""
    sp = np.asarray(sp, dtype=np.float64).ravel()
    sq = np.asarray(sq, dtype=np.float64).ravel()
    if sp.size == 0 or sq.size == 0:
        raise EmptySampleError("empty sample")
    return _clipped_log_terms(sp, sq)


def cross_entropy(f: Callable[[np.ndarray], np.ndarray], xp, xq) -> float:
    """-(1/2) mean log f(xp) - (1/2) mean log(1 - f(xq)).

    Scores are clipped to [1e-7, 1 - 1e-7] before taking logarithms. The raw
    value is returned; nothing here floors ``log 2 - L`` at zero.
    """
    xp = np.asarray(xp, dtype=np.float64)
    xq = np.asarray(xq, dtype=np.float64)
    if len(xp) == 0 or len(xq) == 0:
        raise EmptySampleError("empty sample")
    return cross_entropy_scores(f(xp), f(xq))


def logit_cross_entropy(fp: np.ndarray, fq: np.ndarray) -> float:
    """Cross-entropy from raw log-odds, routed through the clipped sigmoid."""
    return cross_entropy_scores(sigmoid(fp), sigmoid(fq))


def sigmoid(z):
    return expit(np.asarray(z, dtype=np.float64))


# ---------------------------------------------------------------------------
# capacity functions


@dataclass(frozen=True)
class CapacityFunction:
    """Maps an ensemble index i in 0..N onto a capacity in [0, c0].

    ``linear``: c0 * i / N. ``logarithmic``: c0 * log(i + 1) / log(N + 1).
    ``custom-table``: ``table[i]`` (must start at 0 and strictly increase).
    """

    kind: str = "linear"
    c0: float = 0.25
    n: int = 100
    table: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("linear", "logarithmic", "custom-table"):
            raise ValueError(f"unknown capacity kind {self.kind!r}")
        if self.kind == "custom-table":
            t = tuple(float(v) for v in self.table)
            if len(t) < 2 or t[0] != 0.0 or any(b <= a for a, b in zip(t, t[1:])):
                raise ValueError("custom table must start at 0 and strictly increase")
            if t[-1] > 1.0:
                raise ValueError("capacity values must lie in [0, 1]")
            object.__setattr__(self, "table", t)
            object.__setattr__(self, "n", len(t) - 1)
            object.__setattr__(self, "c0", t[-1])
            return
        if not 0.0 < self.c0 <= 1.0:
            raise ValueError("c0 must lie in (0, 1]")
        if self.n < 1:
            raise ValueError("N must be positive")

    def __call__(self, i: int) -> float:
        return capacity_eval(self, i)

    def inverse(self, alpha: float) -> int:
        """Smallest i with c(i) >= alpha; N when alpha exceeds c0."""
        for i in range(self.n + 1):
            if capacity_eval(self, i) >= alpha:
                return i
        return self.n


def capacity_eval(c: CapacityFunction, i: int) -> float:
    if i < 0:
        raise ValueError("negative ensemble index")
    if i > c.n:
        raise IndexError("index beyond ensemble")
    if c.kind == "linear":
        return c.c0 * i / c.n
    if c.kind == "logarithmic":
        return c.c0 * math.log(i + 1) / math.log(c.n + 1)
    return c.table[i]


# ---------------------------------------------------------------------------
# budget accounting


@dataclass
class BudgetLedger:
    """Running count of generator draws, with an optional hard limit.

    A draw that would cross ``limit`` raises ``BudgetExhausted`` and is not
    recorded, so ``total <= limit`` always holds.
    """

    limit: int | None = None
    total: int = 0
    log: list[tuple[str, int]] = field(default_factory=list)

    def record(self, tag: str, n: int) -> "BudgetLedger":
        n = int(n)
        if n < 0:
            raise ValueError("cannot record a negative draw count")
        if self.limit is not None and self.total + n > self.limit:
            raise BudgetExhausted(
                f"drawing {n} more samples would exceed budget {self.limit} "
                f"(spent {self.total})"
            )
        self.total += n
        self.log.append((tag, n))
        return self

    def remaining(self) -> float:
        return math.inf if self.limit is None else self.limit - self.total


def ledger_record(ledger: BudgetLedger, tag: str, n: int) -> BudgetLedger:
    return ledger.record(tag, n)


# ---------------------------------------------------------------------------
# random streams


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator so that spawned children are independent."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def spawn(rng: np.random.Generator, k: int) -> list[np.random.Generator]:
    return rng.spawn(k)


def spawn_one(rng: np.random.Generator) -> np.random.Generator:
    return rng.spawn(1)[0]


def quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    q25, q50, q75 = np.quantile(np.asarray(values, dtype=np.float64), [0.25, 0.5, 0.75])
    return float(q25), float(q50), float(q75)
