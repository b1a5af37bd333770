"""Gradient boosted regression trees on the logistic loss, written from scratch.

Trees fit Newton steps (leaf = -G / (H + 1e-6)) with an exact, greedy split
search over presorted features. The ensemble starts at score 0, i.e. the
constant classifier 1/2, so every prefix of an ensemble is itself a valid
discriminator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from numba import njit
from scipy.special import expit

from .core import LN2, CapacityFunction, as_dataset, logit_cross_entropy, sigmoid
from .divergence import DivergenceEstimate, Fit, PseudoDivergenceFamily

DAMPING = 1e-6
MIN_GAIN = 1e-12


@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int = 100
    max_depth: int = 3
    shrinkage: float = 0.1
    min_leaf: int = 8
    capacity: CapacityFunction | None = None

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < self.shrinkage <= 1.0:
            raise ValueError("shrinkage must lie in (0, 1]")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.capacity is None:
            object.__setattr__(self, "capacity", CapacityFunction("linear", 0.25, self.n_trees))
        elif self.capacity.n != self.n_trees:
            raise ValueError("capacity function N must equal n_trees")


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.value)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def depth(self) -> int:
        def rec(k):
            if self.feature[k] < 0:
                return 0
            return 1 + max(rec(self.left[k]), rec(self.right[k]))

        return rec(0)

    def predict(self, xs: np.ndarray) -> np.ndarray:
        xs = np.ascontiguousarray(xs, dtype=np.float64)
        return _predict(xs, self.feature, self.threshold, self.left, self.right, self.value)


@njit(cache=True)
def _predict(xs, feature, threshold, left, right, value):
    out = np.empty(xs.shape[0])
    for r in range(xs.shape[0]):
        k = 0
        while feature[k] >= 0:
            if xs[r, feature[k]] <= threshold[k]:
                k = left[k]
            else:
                k = right[k]
        out[r] = value[k]
    return out


@njit(cache=True)
def _grow(xs, order, g, h, max_depth, min_leaf):
    """Level-wise exact greedy tree. Returns node arrays and each row's leaf.

    One pass over each presorted feature handles every node of a level.
    """
    n, d = xs.shape
    cap = 2 ** (max_depth + 1) - 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    node_of = np.zeros(n, np.int64)  # global node id, -1 once settled
    leaf_of = np.zeros(n, np.int64)
    n_nodes = 1
    level = np.zeros(1, np.int64)
    G0 = 0.0
    H0 = 0.0
    for r in range(n):
        G0 += g[r]
        H0 += h[r]
    value[0] = -G0 / (H0 + DAMPING)
    for depth in range(max_depth):
        L = level.shape[0]
        if L == 0:
            break
        slot = np.full(cap, -1, np.int64)
        for k in range(L):
            slot[level[k]] = k
        G = np.zeros(L)
        H = np.zeros(L)
        m = np.zeros(L, np.int64)
        for r in range(n):
            nd = node_of[r]
            if nd >= 0:
                k = slot[nd]
                G[k] += g[r]
                H[k] += h[r]
                m[k] += 1
        best_gain = np.full(L, MIN_GAIN)
        best_feat = np.full(L, -1, np.int64)
        best_thr = np.zeros(L)
        for j in range(d):
            gl = np.zeros(L)
            hl = np.zeros(L)
            cnt = np.zeros(L, np.int64)
            prev = np.full(L, -1, np.int64)
            for t in range(n):
                r = order[j, t]
                nd = node_of[r]
                if nd < 0:
                    continue
                k = slot[nd]
                p = prev[k]
                if p >= 0 and cnt[k] >= min_leaf and m[k] - cnt[k] >= min_leaf:
                    a = xs[p, j]
                    b = xs[r, j]
                    if a < b:
                        gain = (gl[k] * gl[k] / (hl[k] + DAMPING)
                                + (G[k] - gl[k]) ** 2 / (H[k] - hl[k] + DAMPING)
                                - G[k] * G[k] / (H[k] + DAMPING))
                        if gain > best_gain[k]:
                            best_gain[k] = gain
                            best_feat[k] = j
                            thr = 0.5 * (a + b)
                            if not (a <= thr and thr < b):
                                thr = a
                            best_thr[k] = thr
                gl[k] += g[r]
                hl[k] += h[r]
                cnt[k] += 1
                prev[k] = r
        n_split = 0
        for k in range(L):
            if best_feat[k] >= 0:
                n_split += 1
        next_level = np.zeros(2 * n_split, np.int64)
        q = 0
        for k in range(L):
            nd = level[k]
            if best_feat[k] >= 0:
                feature[nd] = best_feat[k]
                threshold[nd] = best_thr[k]
                left[nd] = n_nodes
                right[nd] = n_nodes + 1
                next_level[q] = n_nodes
                next_level[q + 1] = n_nodes + 1
                q += 2
                n_nodes += 2
        gsum = np.zeros(n_nodes)
        hsum = np.zeros(n_nodes)
        for r in range(n):
            nd = node_of[r]
            if nd < 0:
                continue
            if feature[nd] >= 0:
                if xs[r, feature[nd]] <= threshold[nd]:
                    nd = left[nd]
                else:
                    nd = right[nd]
                node_of[r] = nd
                gsum[nd] += g[r]
                hsum[nd] += h[r]
            else:
                leaf_of[r] = nd
                node_of[r] = -1
        for k in range(next_level.shape[0]):
            nd = next_level[k]
            value[nd] = -gsum[nd] / (hsum[nd] + DAMPING)
        level = next_level
    for r in range(n):
        if node_of[r] >= 0:
            leaf_of[r] = node_of[r]
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes], leaf_of


def fit_tree(gradients, hessians, xs, cfg: GbdtConfig, order=None, return_leaves=False):
    """Greedy depth-limited regression tree on second-order statistics.

    Splits need ``min_leaf`` rows on each side and positive gain; leaves take
    the damped Newton value -sum(g) / (sum(h) + 1e-6).
    """
    g = np.ascontiguousarray(gradients, dtype=np.float64)
    h = np.ascontiguousarray(hessians, dtype=np.float64)
    xs = np.ascontiguousarray(as_dataset(xs))
    if g.shape != (len(xs),) or h.shape != (len(xs),):
        raise ValueError("need one gradient and one hessian per row")
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
        raise ValueError("gradients and hessians must be finite")
    if order is None:
        order = np.ascontiguousarray(np.argsort(xs, axis=0, kind="stable").T)
    feature, threshold, left, right, value, leaf_of = _grow(xs, order, g, h, cfg.max_depth, cfg.min_leaf)
    tree = Tree(feature, threshold, left, right, value)
    if return_leaves:
        return tree, value[leaf_of]
    return tree


@dataclass
class Ensemble:
    shrinkage: float
    trees: list[Tree] = field(default_factory=list)

    def __len__(self):
        return len(self.trees)

    def prefix(self, i: int) -> "Ensemble":
        if not 0 <= i <= len(self.trees):
            raise IndexError(f"prefix {i} outside 0..{len(self.trees)}")
        return Ensemble(self.shrinkage, self.trees[:i])

    def raw(self, xs, i: int | None = None) -> np.ndarray:
        """Summed log-odds of the first i trees (all by default)."""
        xs = as_dataset(xs)
        i = len(self.trees) if i is None else i
        if not 0 <= i <= len(self.trees):
            raise IndexError(f"prefix {i} outside 0..{len(self.trees)}")
        out = np.zeros(len(xs))
        for tree in self.trees[:i]:
            out += self.shrinkage * tree.predict(xs)
        return out

    def predict_proba(self, xs, i: int | None = None) -> np.ndarray:
        return sigmoid(self.raw(xs, i))


def _labels(xp, xq):
    xs = np.concatenate([xp, xq])
    y = np.concatenate([np.ones(len(xp)), np.zeros(len(xq))])
    # each side carries half the loss regardless of its size
    w = np.concatenate([np.full(len(xp), 0.5 / len(xp)), np.full(len(xq), 0.5 / len(xq))])
    return xs, y, w * len(xs)


@dataclass
class BoostStep:
    i: int
    train_loss: float
    valid_loss: float | None


def boost(xp, xq, cfg: GbdtConfig, xp_valid=None, xq_valid=None, n_trees=None) -> Iterator[tuple[Ensemble, BoostStep]]:
    """Grow an ensemble tree by tree, yielding losses after every tree (and at i=0)."""
    xp, xq = as_dataset(xp), as_dataset(xq)
    if xp.shape[1] != xq.shape[1]:
        raise ValueError("P and Q samples differ in dimension")
    xs, y, w = _labels(xp, xq)
    n_p = len(xp)
    order = np.ascontiguousarray(np.argsort(xs, axis=0, kind="stable").T)
    has_valid = xp_valid is not None
    if has_valid:
        xpv, xqv = as_dataset(xp_valid), as_dataset(xq_valid)
        fpv, fqv = np.zeros(len(xpv)), np.zeros(len(xqv))
    F = np.zeros(len(xs))
    ens = Ensemble(cfg.shrinkage)
    n_trees = cfg.n_trees if n_trees is None else n_trees
    yield ens, BoostStep(0, LN2, LN2 if has_valid else None)
    for i in range(1, n_trees + 1):
        p = expit(F)
        tree, fitted = fit_tree(w * (p - y), w * p * (1.0 - p), xs, cfg, order, return_leaves=True)
        ens.trees.append(tree)
        F += cfg.shrinkage * fitted
        train_loss = logit_cross_entropy(F[:n_p], F[n_p:])
        valid_loss = None
        if has_valid:
            fpv += cfg.shrinkage * tree.predict(xpv)
            fqv += cfg.shrinkage * tree.predict(xqv)
            valid_loss = logit_cross_entropy(fpv, fqv)
        yield ens, BoostStep(i, train_loss, valid_loss)


def fit_ensemble(xp, xq, cfg: GbdtConfig, n_trees=None) -> tuple[Ensemble, list[float]]:
    losses = []
    ens = None
    for ens, step in boost(xp, xq, cfg, n_trees=n_trees):
        losses.append(step.train_loss)
    return ens, losses


def ensemble_prefix_divergence(ens: Ensemble, i: int, xp, xq) -> float:
    """ln 2 - L(F_i, xp, xq) for the first i trees."""
    if not 0 <= i <= len(ens):
        raise IndexError(f"prefix {i} outside 0..{len(ens)}")
    if i == 0:
        return 0.0
    return LN2 - logit_cross_entropy(ens.raw(xp, i), ens.raw(xq, i))


def stop_index(losses, capacity: CapacityFunction) -> tuple[int, bool]:
    """First i with losses[i] <= c(i) ln 2, else the last index.

    Returns ``(i, triggered)``. ``losses[0]`` belongs to the empty ensemble.
    """
    last = min(len(losses) - 1, capacity.n)
    for i in range(last + 1):
        if losses[i] <= capacity(i) * LN2:
            return i, True
    return last, False


@dataclass
class BoostedResult:
    estimate: DivergenceEstimate
    ensemble: Ensemble
    trajectory: list[tuple[int, float, float, float]]


def boosted_ad_full(xp, xq, cfg: GbdtConfig, xp_valid=None, xq_valid=None) -> BoostedResult:
    """Grow until the held-out loss drops to c(i) ln 2 (or N trees are used).

    Without validation data the training loss drives the stopping rule.
    """
    if xp_valid is None:
        xp_valid, xq_valid = xp, xq
    cap = cfg.capacity
    traj = []
    for ens, step in boost(xp, xq, cfg, xp_valid, xq_valid):
        traj.append((step.i, step.train_loss, step.valid_loss, cap(step.i) * LN2))
        if step.valid_loss <= cap(step.i) * LN2:
            break
    i, train_loss, valid_loss, _ = traj[-1]
    est = DivergenceEstimate(
        value=LN2 - valid_loss,
        alpha_used=cap(i),
        train_loss=train_loss,
        valid_loss=valid_loss,
        samples_used=len(xp) + len(xq) + (len(xp_valid) + len(xq_valid) if xp_valid is not xp else 0),
        n=len(xp),
        model=ens,
    )
    return BoostedResult(est, ens, traj)


def boosted_ad(xp, xq, cfg: GbdtConfig, xp_valid=None, xq_valid=None) -> DivergenceEstimate:
    return boosted_ad_full(xp, xq, cfg, xp_valid, xq_valid).estimate


def write_trajectory(path, trajectory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "train_loss", "valid_loss", "threshold"])
        for i, tl, vl, thr in trajectory:
            w.writerow([i, f"{tl:.17g}", f"{vl:.17g}", f"{thr:.17g}"])


# ---------------------------------------------------------------------------
# trainers for the estimators in ``divergence``


def jsd_trainer(cfg: GbdtConfig):
    """Full-size ensemble; value is ln 2 minus the held-out loss."""

    def train(xp, xq, xpv, xqv, rng) -> Fit:
        *_, (ens, step) = boost(xp, xq, cfg, xpv, xqv)
        return Fit(LN2 - step.valid_loss, 1.0, step.train_loss, step.valid_loss, ens)

    return train


def boosted_trainer(cfg: GbdtConfig):
    def train(xp, xq, xpv, xqv, rng) -> Fit:
        est = boosted_ad(xp, xq, cfg, xpv, xqv)
        return Fit(est.value, est.alpha_used, est.train_loss, est.valid_loss, est.model)

    return train


def prefix_family(cfg: GbdtConfig) -> PseudoDivergenceFamily:
    """alpha -> ensemble of the smallest size i with c(i) >= alpha (N past c0)."""

    def trainer_at(alpha: float):
        n_trees = cfg.capacity.inverse(alpha) if alpha < 1.0 else cfg.n_trees

        def train(xp, xq, xpv, xqv, rng) -> Fit:
            *_, (ens, step) = boost(xp, xq, cfg, xpv, xqv, n_trees=n_trees)
            return Fit(LN2 - step.valid_loss, alpha, step.train_loss, step.valid_loss, ens)

        return train

    return PseudoDivergenceFamily(trainer_at, kind="boosted", name="gbdt-prefix")
