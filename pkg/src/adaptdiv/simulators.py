"""Seeded toy simulators.

Every draw goes through :func:`sample`, which charges the ledger before the
generator runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import BudgetLedger


class OutOfBounds(ValueError):
    pass


def rotate(xs: np.ndarray, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return xs @ np.array([[c, s], [-s, c]])


@dataclass(frozen=True)
class XorTask:
    """Equal mixture of two Gaussians on the diagonal, rotated by theta.

    The mixture is symmetric under a half turn, so theta and theta + pi give
    the same distribution.
    """

    spread: float = 1.0
    std: float = 0.35
    name: str = "xor"
    nominal: tuple[float, ...] = (0.0,)
    bounds: tuple[tuple[float, float], ...] = ((-math.pi, math.pi),)
    search_box: tuple[tuple[float, float], ...] = ((-math.pi / 2, math.pi / 2),)
    initial_guess: tuple[float, ...] = (1.0,)
    dim: int = 2

    def base(self, n: int, rng: np.random.Generator) -> np.ndarray:
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        centre = np.outer(sign, np.full(2, self.spread / math.sqrt(2.0)))
        return centre + self.std * rng.standard_normal((n, 2))

    def generate(self, psi, n, rng):
        return rotate(self.base(n, rng), float(psi[0]))

    def error(self, psi) -> float:
        # distance to the nearest equivalent optimum (period pi)
        d = math.remainder(float(psi[0]) - self.nominal[0], math.pi)
        return abs(d)


@dataclass(frozen=True)
class RollTask:
    """Two-turn Archimedean spiral with radial noise, rotated by theta."""

    turns: float = 2.0
    noise: float = 0.05
    name: str = "roll"
    nominal: tuple[float, ...] = (0.0,)
    bounds: tuple[tuple[float, float], ...] = ((-math.pi, math.pi),)
    search_box: tuple[tuple[float, float], ...] = ((-math.pi, math.pi),)
    initial_guess: tuple[float, ...] = (1.0,)
    dim: int = 2

    def base(self, n: int, rng: np.random.Generator) -> np.ndarray:
        t = rng.random(n) * 2.0 * math.pi * self.turns
        r = t / (2.0 * math.pi * self.turns) + self.noise * rng.standard_normal(n)
        return np.column_stack([r * np.cos(t), r * np.sin(t)])

    def generate(self, psi, n, rng):
        return rotate(self.base(n, rng), float(psi[0]))

    def error(self, psi) -> float:
        return abs(math.remainder(float(psi[0]) - self.nominal[0], 2.0 * math.pi))


@dataclass(frozen=True)
class DetectorTask:
    """Calorimeter toy: a spherical 32x32 (eta, phi) grid whose centre is offset.

    Each event emits ``n_rays`` straight rays from the collision point with
    isotropic directions and Exp(1) energies. A ray hits the sphere of radius
    ``radius`` around the detector centre; the hit position, seen from the
    centre, picks the cell that records the energy.
    """

    n_eta: int = 32
    n_phi: int = 32
    eta_max: float = 5.0
    n_rays: int = 16
    radius: float = 1.5
    name: str = "detector"
    nominal: tuple[float, ...] = (0.0, 0.0, 0.0)
    bounds: tuple[tuple[float, float], ...] = ((-0.85, 0.85),) * 3
    search_box: tuple[tuple[float, float], ...] = ((-0.85, 0.85),) * 3
    initial_guess: tuple[float, ...] = (0.75, 0.75, 0.75)

    @property
    def dim(self) -> int:
        return self.n_eta * self.n_phi

    def generate(self, psi, n, rng):
        offset = np.asarray(psi, dtype=np.float64)
        m = n * self.n_rays
        u = rng.standard_normal((m, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        energy = rng.exponential(1.0, m)
        # solve |t u - offset| = R for t > 0; the origin is inside the sphere
        b = u @ offset
        t = b + np.sqrt(b * b - offset @ offset + self.radius**2)
        hit = t[:, None] * u - offset
        x, y, z = hit.T
        rho = np.hypot(x, y)
        eta = np.arcsinh(z / np.maximum(rho, 1e-12))
        phi = np.arctan2(y, x)
        ie = np.floor((eta + self.eta_max) / (2 * self.eta_max) * self.n_eta).astype(np.int64)
        ip = np.floor((phi + math.pi) / (2 * math.pi) * self.n_phi).astype(np.int64)
        ip = np.clip(ip, 0, self.n_phi - 1)
        inside = (ie >= 0) & (ie < self.n_eta)
        event = np.repeat(np.arange(n), self.n_rays)
        out = np.zeros((n, self.n_eta * self.n_phi))
        np.add.at(out, (event[inside], ie[inside] * self.n_phi + ip[inside]), energy[inside])
        return out

    def error(self, psi) -> float:
        return float(np.linalg.norm(np.asarray(psi, dtype=np.float64) - np.asarray(self.nominal)))


TASKS: dict[str, Callable[[], object]] = {
    "xor": XorTask,
    "roll": RollTask,
    "detector": DetectorTask,
}


def get_task(name: str, **params):
    """Task by name; keyword arguments override its dataclass fields."""
    try:
        cls = TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
    return cls(**params)


def check_bounds(task, psi) -> np.ndarray:
    psi = np.atleast_1d(np.asarray(psi, dtype=np.float64))
    if psi.shape != (len(task.bounds),):
        raise OutOfBounds(f"{task.name} takes {len(task.bounds)} parameters, got {psi.shape}")
    for v, (lo, hi) in zip(psi, task.bounds):
        if not lo <= v <= hi:
            raise OutOfBounds(f"parameter {v} outside [{lo}, {hi}] for task {task.name}")
    return psi


def sample(task, psi, n: int, rng: np.random.Generator, ledger: BudgetLedger | None) -> np.ndarray:
    """n i.i.d. draws at parameters psi; the ledger is charged first."""
    if n < 1:
        raise ValueError("n must be >= 1")
    psi = check_bounds(task, psi)
    if ledger is not None:
        ledger.record(f"{task.name}", n)
    return task.generate(psi, n, rng)


def ground_truth(task, n: int, rng: np.random.Generator, ledger: BudgetLedger | None) -> np.ndarray:
    return sample(task, task.nominal, n, rng, ledger)


def sampler(task, psi) -> Callable[[int, np.random.Generator], np.ndarray]:
    """Uncharged draw function, for estimators that do their own accounting."""
    psi = check_bounds(task, psi)
    return lambda n, rng: task.generate(psi, n, rng)
