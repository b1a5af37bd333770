"""Command line entry point: ``adaptdiv {estimate,optimize,compare,selftest}``."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import harness, selftest
from .core import BudgetLedger, make_rng


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if getattr(args, "repeats", None) is not None:
        changes["repeats"] = args.repeats
    if getattr(args, "budget", None) is not None:
        changes["budget"] = args.budget
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _psi(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.replace(",", " ").split()], dtype=np.float64)


def cmd_estimate(args) -> int:
    cfg = _config(args)
    task = cfg.make_task()
    psi = _psi(args.psi) if args.psi else np.asarray(task.nominal, dtype=np.float64)
    ledger = BudgetLedger()
    est = harness.estimate_at(cfg, psi, make_rng(cfg.seed), ledger)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    header = harness.header_lines(cfg) + [f"# psi = {harness._fmt(tuple(float(x) for x in psi))}"]
    harness._write_csv(
        out / "estimate.csv",
        header,
        ["value", "alpha_used", "train_loss", "valid_loss", "n", "samples_used", "ledger_total"],
        [(float(est.value), float(est.alpha_used), float(est.train_loss), float(est.valid_loss),
          int(est.n), int(est.samples_used), int(ledger.total))],
    )
    harness._write_csv(
        out / "probes.csv",
        header,
        ["probe", "alpha", "n", "train_loss", "valid_loss", "value"],
        [(i, float(p.alpha), int(p.n), float(p.train_loss), float(p.valid_loss), float(p.value))
         for i, p in enumerate(est.probes)],
    )
    print(f"value = {est.value:.17g}  n = {est.n}  samples = {ledger.total}")
    return 0


def cmd_optimize(args) -> int:
    cfg = _config(args)
    try:
        curve = harness.run_experiment(cfg)
    except harness.RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finals = harness.final_best(curve)
    if finals:
        print(f"{len(finals)} runs, median final best error {np.median(finals):.6g}, output in {cfg.out}")
    else:
        print(f"no run completed an evaluation within the budget, output in {cfg.out}")
    return 0


def cmd_compare(args) -> int:
    out = Path(args.out or "compare")
    cfgs = []
    for name, path in (("a", args.config_a), ("b", args.config_b)):
        args.config = path
        cfg = _config(args)
        cfgs.append(dataclasses.replace(cfg, out=str(out / name)))
    a, b = cfgs
    if a.task != b.task or a.budget != b.budget:
        print("error: compared configs need the same task and budget", file=sys.stderr)
        return 2
    for cfg in cfgs:
        try:
            harness.run_experiment(cfg)
        except harness.RunError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    rows = harness.compare(a.out, b.out, out / "compare.csv")
    g, ma, mb, ratio = rows[-1]
    print(f"at {g} samples: median A {ma:.6g}, median B {mb:.6g}, ratio {ratio:.4g}")
    return 0


def cmd_selftest(args) -> int:
    results = selftest.run_all()
    out = Path(args.out or "selftest")
    out.mkdir(parents=True, exist_ok=True)
    harness._write_csv(out / "selftest.csv", [], ["check", "status", "detail"], results)
    for name, status, detail in results:
        print(f"{status:4s} {name}: {detail}")
    return 0 if all(s == "PASS" for _, s, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptdiv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="base seed (overrides the config)")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("estimate", help="one divergence between the task at psi and its nominal point")
    common(p)
    p.add_argument("--psi", help="parameter vector, comma separated (default: nominal)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("optimize", help="repeated budgeted optimisation runs for one config")
    common(p)
    p.add_argument("--repeats", type=int)
    p.add_argument("--budget", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("compare", help="run two configs and compare their median curves")
    p.add_argument("config_a")
    p.add_argument("config_b")
    common(p, config=False)
    p.add_argument("--repeats", type=int)
    p.add_argument("--budget", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("selftest", help="fast invariant checks; nonzero exit on failure")
    p.add_argument("--out")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
