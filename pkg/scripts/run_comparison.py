"""Run a set of configs and print the median final error of each.

    python3 scripts/run_comparison.py configs/xor_*.cfg
    python3 scripts/run_comparison.py configs/detector_*.cfg --repeats 3

With ``--baseline NAME`` the ratio of every median to that divergence's
median is printed as well.
"""

import argparse
import dataclasses
import time

import numpy as np

from adaptdiv import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("configs", nargs="+")
    ap.add_argument("--repeats", type=int)
    ap.add_argument("--budget", type=int)
    ap.add_argument("--baseline", default="jsd")
    args = ap.parse_args()

    medians = {}
    for path in args.configs:
        cfg = harness.load_config(path)
        changes = {k: v for k, v in (("repeats", args.repeats), ("budget", args.budget)) if v is not None}
        cfg = dataclasses.replace(cfg, **changes)
        start = time.perf_counter()
        curve = harness.run_experiment(cfg)
        # bo reports the best point seen, avo the final search mean
        finals = harness.final_best(curve) if cfg.optimizer == "bo" else harness.final_errors(curve)
        medians[cfg.divergence] = float(np.median(finals)) if finals else float("nan")
        print(f"{cfg.divergence:11s} median final error {medians[cfg.divergence]:.4g} "
              f"({len(finals)} runs, {time.perf_counter() - start:.0f} s, output in {cfg.out})", flush=True)
    if args.baseline in medians:
        for div, m in medians.items():
            print(f"{div:11s} / {args.baseline}: {m / medians[args.baseline]:.3g}")


if __name__ == "__main__":
    main()
