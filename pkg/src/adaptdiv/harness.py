"""Experiment runner: configs, repeated budgeted optimisation runs, quartile
aggregation and CSV output.

A config is a flat ``key = value`` file. Dotted keys address nested settings,
for example ``gbdt.n_trees = 100`` or ``avo.lr = 0.01``. Every CSV written
here starts with the full config as ``#`` comment lines.
"""

from __future__ import annotations

import configparser
import copy
import csv
import dataclasses
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gbdt, nn, simulators
from .core import LN2, BudgetExhausted, BudgetLedger, CapacityFunction, cross_entropy_scores, make_rng, quartiles, spawn
from .divergence import NN_CRITERION, GBDT_CRITERION, GapCriterion, estimate_jsd, min_training_size
from .optimizers import BoState, SearchDistribution, avo_run, bo_run

DIVERGENCES = ("jsd", "ad-linear", "ad-log", "ad-dropout", "ad-l2")
OPTIMIZERS = ("bo", "avo")
ACCOUNTING = (
    "budget counts every generator draw (training and validation rows, "
    "including rows drawn while searching for the sample size); "
    "reference-sample draws are not counted"
)


class RunError(RuntimeError):
    pass


@dataclass
class BoSettings:
    n_init: int = 5
    n_candidates: int = 2048
    n_refine: int = 64
    max_iters: int = 500


@dataclass
class AvoSettings:
    k: int = 16
    lr: float = 1e-2
    init_std: float = 0.25
    max_steps: int = 2000
    # training steps for each warm-started discriminator update
    inner_steps: int = 50
    # smallest per-generator share of the sample, so each credit has support
    rows_per_psi: int = 64


@dataclass
class ExperimentConfig:
    task: str = "xor"
    divergence: str = "jsd"
    optimizer: str = "bo"
    budget: int = 200_000
    repeats: int = 20
    seed: int = 0
    out: str = "runs"
    # discriminator used by jsd: "gbdt" or "nn"; empty picks by optimizer
    backend: str = ""
    workers: int = 1
    c0: float = 0.25
    task_params: dict = field(default_factory=dict)
    gbdt: gbdt.GbdtConfig = field(default_factory=gbdt.GbdtConfig)
    nn: nn.NnConfig = field(default_factory=nn.NnConfig)
    criterion: GapCriterion | None = None
    bo: BoSettings = field(default_factory=BoSettings)
    avo: AvoSettings = field(default_factory=AvoSettings)

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"unknown divergence {self.divergence!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.task not in simulators.TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not self.backend:
            if self.divergence in ("ad-linear", "ad-log"):
                self.backend = "gbdt"
            elif self.divergence in ("ad-dropout", "ad-l2"):
                self.backend = "nn"
            else:
                self.backend = "gbdt" if self.optimizer == "bo" else "nn"
        if self.backend not in ("gbdt", "nn"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.divergence in ("ad-linear", "ad-log") and self.backend != "gbdt":
            raise ValueError(f"{self.divergence} needs the gbdt backend")
        if self.divergence in ("ad-dropout", "ad-l2") and self.backend != "nn":
            raise ValueError(f"{self.divergence} needs the nn backend")
        if self.criterion is None:
            self.criterion = GBDT_CRITERION if self.backend == "gbdt" else NN_CRITERION
        kind = "logarithmic" if self.divergence == "ad-log" else "linear"
        cap = CapacityFunction(kind, self.c0, self.gbdt.n_trees)
        if self.gbdt.capacity != cap:
            self.gbdt = dataclasses.replace(self.gbdt, capacity=cap)

    def make_task(self):
        return simulators.get_task(self.task, **self.task_params)


# ---------------------------------------------------------------------------
# config text format


def _convert(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(float(text)) if "e" in text.lower() else int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(float(v) for v in text.replace(",", " ").split())
    return text


def _parse_value(text: str):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def parse_config(text: str) -> ExperimentConfig:
    """Parse the flat ``key = value`` format (``#`` starts a comment)."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[config]\n" + text)
    return config_from_items(dict(parser["config"]))


def config_from_items(items: dict[str, str]) -> ExperimentConfig:
    top: dict = {}
    nested: dict[str, dict] = {"gbdt": {}, "nn": {}, "criterion": {}, "bo": {}, "avo": {}, "task": {}}
    defaults = ExperimentConfig()
    for key, raw in items.items():
        head, _, rest = key.partition(".")
        if rest:
            if head not in nested:
                raise ValueError(f"unknown config section {head!r}")
            nested[head][rest] = raw
        else:
            structured = ("gbdt", "nn", "criterion", "bo", "avo", "task_params")
            if key not in {f.name for f in dataclasses.fields(ExperimentConfig)} or key in structured:
                raise ValueError(f"unknown config key {key!r}")
            top[key] = _convert(raw, getattr(defaults, key))

    def build(cls, values: dict, section: str):
        base = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        out = {}
        for k, v in values.items():
            if k not in known or k == "capacity":
                raise ValueError(f"unknown config key {section}.{k}")
            out[k] = _convert(v, getattr(base, k))
        return out

    gb = build(gbdt.GbdtConfig, nested["gbdt"], "gbdt")
    top["nn"] = nn.NnConfig(**build(nn.NnConfig, nested["nn"], "nn"))
    top["bo"] = BoSettings(**build(BoSettings, nested["bo"], "bo"))
    top["avo"] = AvoSettings(**build(AvoSettings, nested["avo"], "avo"))
    top["task_params"] = {k: _parse_value(v) for k, v in nested["task"].items()}
    top["gbdt"] = gbdt.GbdtConfig(**gb)
    divergence = top.get("divergence", defaults.divergence)
    if nested["criterion"]:
        backend = top.get("backend", "")
        if not backend:
            backend = ExperimentConfig(
                divergence=divergence, optimizer=top.get("optimizer", defaults.optimizer)
            ).backend
        base = GBDT_CRITERION if backend == "gbdt" else NN_CRITERION
        top["criterion"] = dataclasses.replace(base, **build(GapCriterion, nested["criterion"], "criterion"))
    return ExperimentConfig(**top)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    if isinstance(v, tuple):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def config_lines(cfg: ExperimentConfig) -> list[str]:
    """Every setting as ``key = value``, in a fixed order."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "task_params":
            lines += [f"task.{k} = {_fmt(x)}" for k, x in sorted(v.items())]
        elif dataclasses.is_dataclass(v):
            for g in dataclasses.fields(v):
                if g.name == "capacity":
                    continue
                lines.append(f"{f.name}.{g.name} = {_fmt(getattr(v, g.name))}")
        else:
            lines.append(f"{f.name} = {_fmt(v)}")
    return lines


def header_lines(cfg: ExperimentConfig) -> list[str]:
    task = cfg.make_task()
    # the output directory says where files go, not what was run
    lines = ["# " + line for line in config_lines(cfg) if not line.startswith("out = ")]
    lines.append(f"# task.nominal = {_fmt(tuple(float(x) for x in task.nominal))}")
    lines.append(f"# task.bounds = {_fmt(tuple(float(x) for b in task.bounds for x in b))}")
    lines.append(f"# accounting: {ACCOUNTING}")
    return lines


# ---------------------------------------------------------------------------
# objectives


def _trainer(cfg: ExperimentConfig):
    if cfg.backend == "gbdt":
        return gbdt.jsd_trainer(cfg.gbdt) if cfg.divergence == "jsd" else gbdt.boosted_trainer(cfg.gbdt)
    variant = {"jsd": "jsd", "ad-dropout": "dropout", "ad-l2": "l2"}[cfg.divergence]
    return nn.nn_trainer(variant, cfg.nn)


def estimate_at(cfg: ExperimentConfig, psi, rng, ledger: BudgetLedger | None = None):
    """One divergence estimate between the task at ``psi`` and its nominal point."""
    task = cfg.make_task()
    psi = simulators.check_bounds(task, psi)
    p = simulators.sampler(task, task.nominal)
    q = simulators.sampler(task, psi)
    if cfg.divergence == "jsd":
        return estimate_jsd(_trainer(cfg), p, q, cfg.criterion, ledger, rng)
    _, est = min_training_size(_trainer(cfg), p, q, cfg.criterion, ledger, rng)
    return est


class MixtureObjective:
    """Per-step divergence for AVO against the mixture of K generators.

    One discriminator, warm-started from the previous step, is trained on the
    reference sample against the pooled generator sample. The per-generator
    value is ln 2 minus its held-out loss on that generator's rows alone. The
    sample size starts at half the previous step's size (at least
    ``rows_per_psi`` rows per generator) and doubles until the held-out gap
    meets the tolerance. On the gbdt backend a fresh ensemble is grown every
    step instead, and the per-generator value uses its stopped prefix.
    """

    def __init__(self, cfg: ExperimentConfig, ledger: BudgetLedger):
        self.cfg = cfg
        self.task = cfg.make_task()
        self.ledger = ledger
        self.variant = {"jsd": "jsd", "ad-dropout": "dropout", "ad-l2": "l2"}.get(cfg.divergence)
        self.nn_cfg = dataclasses.replace(cfg.nn, min_steps=cfg.avo.inner_steps, max_steps=cfg.avo.inner_steps)
        self.state: nn.NnTrainState | None = None
        self.last_n = 0

    def _draw(self, psis, n_have, n_want, rng):
        rows, labels = [], []
        k = len(psis)
        idx = np.arange(n_have, n_want) % k
        for j in range(k):
            m = int(np.sum(idx == j))
            if m:
                rows.append(simulators.sample(self.task, psis[j], m, rng, self.ledger))
                labels.append(np.full(m, j))
        return np.concatenate(rows), np.concatenate(labels)

    def __call__(self, psis, rng):
        crit = self.cfg.criterion
        psis = np.atleast_2d(psis)
        k = len(psis)
        rp, rq, rpv, rqv, rfit = spawn(rng, 5)
        n = max(crit.min_n, k * self.cfg.avo.rows_per_psi, self.last_n // 2)
        have = 0
        xp = xq = xpv = xqv = None
        lq = lqv = None
        while True:
            if self.ledger.limit is not None and 2 * (n - have) > self.ledger.remaining():
                raise BudgetExhausted(f"mixture step needs {2 * (n - have)} more samples")
            ext_p = simulators.ground_truth(self.task, n - have, rp, None)
            ext_pv = simulators.ground_truth(self.task, n - have, rpv, None)
            ext_q, ext_lq = self._draw(psis, have, n, rq)
            ext_qv, ext_lqv = self._draw(psis, have, n, rqv)
            if have:
                xp, xpv = np.concatenate([xp, ext_p]), np.concatenate([xpv, ext_pv])
                xq, xqv = np.concatenate([xq, ext_q]), np.concatenate([xqv, ext_qv])
                lq, lqv = np.concatenate([lq, ext_lq]), np.concatenate([lqv, ext_lqv])
            else:
                xp, xpv, xq, xqv, lq, lqv = ext_p, ext_pv, ext_q, ext_qv, ext_lq, ext_lqv
            have = n
            if self.cfg.backend == "gbdt":
                fit = _trainer(self.cfg)(xp, xq, xpv, xqv, rfit)
                est, predict = fit, fit.model.predict_proba
            else:
                res = nn.ad_nn_full(xp, xq, xpv, xqv, self.variant, self.nn_cfg, rfit,
                                    state=copy.deepcopy(self.state))
                est, predict = res.estimate, res.net.predict
            if abs(est.train_loss - est.valid_loss) <= crit.tolerance or n >= crit.max_n:
                break
            n = min(2 * n, crit.max_n)
        if self.cfg.backend == "nn":
            self.state = res.state
        self.last_n = n
        sp = predict(xpv)
        sq = predict(xqv)
        values = np.array([LN2 - cross_entropy_scores(sp, sq[lqv == j]) for j in range(k)])
        return values, est.value


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    replica: int
    rows: list[tuple]  # (index, cumulative_samples, error, best_error, value, *params)
    n_params: int
    status: str = "ok"


def _best_so_far(errors):
    return list(np.minimum.accumulate(np.asarray(errors, dtype=np.float64))) if len(errors) else []


def run_once(cfg: ExperimentConfig, replica: int) -> RunResult:
    task = cfg.make_task()
    rng = make_rng(cfg.seed + replica)
    ledger = BudgetLedger(cfg.budget)
    status = "ok"
    if cfg.optimizer == "bo":
        r_bo, r_obj = spawn(rng, 2)
        streams = iter(spawn(r_obj, cfg.bo.max_iters + cfg.bo.n_init))
        bounds = np.asarray(task.search_box, dtype=np.float64)

        def objective(psi):
            return estimate_at(cfg, psi, next(streams), ledger).value

        state = BoState(bounds, r_bo, cfg.bo.n_candidates, cfg.bo.n_refine, cfg.bo.n_init)
        hist = bo_run(objective, bounds, cfg.bo.max_iters, ledger, r_bo, n_init=cfg.bo.n_init, state=state)
        errors = [task.error(h.psi) for h in hist]
        best = _best_so_far(errors)
        rows = [
            (h.iteration, h.cumulative_samples, e, b, h.value, *map(float, h.psi))
            for h, e, b in zip(hist, errors, best)
        ]
        if len(hist) < cfg.bo.n_init + cfg.bo.max_iters:
            status = "budget"
        return RunResult(replica, rows, len(bounds), status)

    r_init, r_avo = spawn(rng, 2)
    objective = MixtureObjective(cfg, ledger)
    init = SearchDistribution(
        np.array(task.initial_guess, dtype=np.float64),
        np.full(len(task.initial_guess), math.log(cfg.avo.init_std)),
    )
    traj = avo_run(objective, init, cfg.avo.max_steps, ledger, r_avo, adam_lr=cfg.avo.lr, k=cfg.avo.k,
                   bounds=task.bounds)
    errors = [task.error(s.mean) for s in traj]
    best = _best_so_far(errors)
    rows = [
        (s.step, s.cumulative_samples, e, b, s.value, *map(float, s.mean))
        for s, e, b in zip(traj, errors, best)
    ]
    if len(traj) <= cfg.avo.max_steps:
        status = "budget"
    return RunResult(replica, rows, len(task.initial_guess), status)


def _safe_run(args):
    cfg, replica = args
    try:
        return run_once(cfg, replica)
    except Exception as exc:  # reported by the coordinator
        return RunResult(replica, [], 0, status=f"error: {type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class ConvergenceCurve:
    runs: list[RunResult]
    grid: np.ndarray
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray


def step_interpolate(samples, values, grid) -> np.ndarray:
    """Right-continuous step function: value of the last row with samples <= g."""
    samples = np.asarray(samples, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    idx = np.searchsorted(samples, np.asarray(grid, dtype=np.float64), side="right") - 1
    out = np.full(len(idx), np.nan)
    ok = idx >= 0
    out[ok] = values[idx[ok]]
    return out


def sample_grid(budget: int, points: int = 100) -> np.ndarray:
    return np.unique(np.round(np.linspace(0, budget, points + 1)).astype(np.int64))


def aggregate(runs: list[RunResult], budget: int, points: int = 100) -> ConvergenceCurve:
    grid = sample_grid(budget, points)
    curves = []
    for run in runs:
        s = [r[1] for r in run.rows]
        b = [r[3] for r in run.rows]
        curves.append(step_interpolate(s, b, grid))
    curves = np.array(curves).reshape(len(curves), len(grid))
    defined = np.all(np.isfinite(curves), axis=0) if len(curves) else np.zeros(len(grid), bool)
    grid, curves = grid[defined], curves[:, defined]
    if len(grid):
        q25, med, q75 = np.quantile(curves, [0.25, 0.5, 0.75], axis=0)
    else:
        q25 = med = q75 = np.zeros(0)
    return ConvergenceCurve(runs, grid, med, q25, q75)


def _write_csv(path: Path, header: list[str], columns: list[str], rows) -> None:
    buf = io.StringIO()
    for line in header:
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue())


def run_columns(cfg: ExperimentConfig, n_params: int) -> list[str]:
    name = "mean" if cfg.optimizer == "avo" else "psi"
    index = "step" if cfg.optimizer == "avo" else "evaluation"
    return [index, "cumulative_samples", "error", "best_error", "value"] + [f"{name}_{i}" for i in range(n_params)]


def run_experiment(cfg: ExperimentConfig, out: str | os.PathLike | None = None) -> ConvergenceCurve:
    """Run all replicas, write ``run_NNN.csv`` files and ``aggregate.csv``.

    Raises ``RunError`` after writing whatever finished if any replica failed.
    """
    out = Path(cfg.out if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, r) for r in range(cfg.repeats)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            runs = list(pool.map(_safe_run, jobs))
    else:
        runs = [_safe_run(j) for j in jobs]
    header = header_lines(cfg)
    for run in runs:
        _write_csv(
            out / f"run_{run.replica:03d}.csv",
            header + [f"# status = {run.status}"],
            run_columns(cfg, run.n_params),
            run.rows,
        )
    good = [r for r in runs if not r.status.startswith("error")]
    curve = aggregate(good, cfg.budget)
    _write_csv(
        out / "aggregate.csv",
        header + [f"# runs = {len(good)}"],
        ["cumulative_samples", "median", "q25", "q75"],
        [(int(g), float(m), float(a), float(b)) for g, m, a, b in zip(curve.grid, curve.median, curve.q25, curve.q75)],
    )
    failed = [r for r in runs if r.status.startswith("error")]
    if failed:
        raise RunError("; ".join(f"run {r.replica}: {r.status}" for r in failed))
    return curve


def final_errors(curve: ConvergenceCurve) -> list[float]:
    """Error of the last recorded point (final |psi - psi*| or ||mu - psi*||) per run."""
    return [r.rows[-1][2] for r in curve.runs if r.rows]


def final_best(curve: ConvergenceCurve) -> list[float]:
    return [r.rows[-1][3] for r in curve.runs if r.rows]


# ---------------------------------------------------------------------------
# comparison


def read_aggregate(path) -> tuple[dict[str, str], np.ndarray]:
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key.strip()] = value.strip()
        else:
            body.append(line)
    rows = list(csv.reader(body))[1:]
    return meta, np.array([[float(v) for v in r] for r in rows]).reshape(-1, 4)


def compare_curves(meta_a, agg_a, meta_b, agg_b) -> list[tuple[int, float, float, float]]:
    """Median best error of A and B at every budget both grids share, and A / B."""
    if meta_a.get("task") != meta_b.get("task"):
        raise ValueError(f"task mismatch: {meta_a.get('task')!r} vs {meta_b.get('task')!r}")
    a = {int(r[0]): r[1] for r in agg_a}
    b = {int(r[0]): r[1] for r in agg_b}
    common = sorted(set(a) & set(b))
    if not common:
        raise ValueError("no common grid")
    out = []
    for g in common:
        ma, mb = a[g], b[g]
        if ma == mb:
            ratio = 1.0
        elif mb == 0:
            ratio = math.inf
        else:
            ratio = ma / mb
        out.append((g, float(ma), float(mb), float(ratio)))
    return out


def compare(dir_a, dir_b, out=None) -> list[tuple[int, float, float, float]]:
    meta_a, agg_a = read_aggregate(Path(dir_a) / "aggregate.csv")
    meta_b, agg_b = read_aggregate(Path(dir_b) / "aggregate.csv")
    rows = compare_curves(meta_a, agg_a, meta_b, agg_b)
    if out is not None:
        header = [
            f"# a = {dir_a} ({meta_a.get('divergence')})",
            f"# b = {dir_b} ({meta_b.get('divergence')})",
            f"# task = {meta_a.get('task')}",
        ]
        _write_csv(Path(out), header, ["cumulative_samples", "median_a", "median_b", "ratio"], rows)
    return rows
