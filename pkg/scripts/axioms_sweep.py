"""Divergence estimates on the rotated xor task as a function of the angle.

Prints one row per angle with the mean over seeds for every estimator, so
the zero at theta = 0 and theta = pi and the peak at pi/2 can be eyeballed.

    python3 scripts/axioms_sweep.py --seeds 3 --n 4096
"""

import argparse
import dataclasses

import numpy as np

from adaptdiv import gbdt, nn, simulators
from adaptdiv.core import CapacityFunction, make_rng, spawn


def estimators():
    log_cap = gbdt.GbdtConfig(capacity=CapacityFunction("logarithmic", 0.25, 100))
    net = dataclasses.replace(nn.NnConfig(), r1_coeff=0.0)
    return {
        "jsd": lambda d, r: gbdt.jsd_trainer(gbdt.GbdtConfig())(*d, r).value,
        "ad-linear": lambda d, r: gbdt.boosted_ad(*d[:2], gbdt.GbdtConfig(), *d[2:]).value,
        "ad-log": lambda d, r: gbdt.boosted_ad(*d[:2], log_cap, *d[2:]).value,
        "ad-dropout": lambda d, r: nn.ad_nn(*d, "dropout", net, r).value,
        "ad-l2": lambda d, r: nn.ad_nn(*d, "l2", net, r).value,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--n", type=int, default=4096)
    ap.add_argument("--angles", type=int, default=9)
    args = ap.parse_args()

    task = simulators.XorTask()
    ests = estimators()
    print("theta," + ",".join(ests))
    for theta in np.linspace(0.0, np.pi, args.angles):
        means = []
        for est in ests.values():
            vals = []
            for seed in range(args.seeds):
                r = spawn(make_rng(seed), 5)
                data = (task.generate((0.0,), args.n, r[0]), task.generate((theta,), args.n, r[1]),
                        task.generate((0.0,), args.n, r[2]), task.generate((theta,), args.n, r[3]))
                vals.append(est(data, r[4]))
            means.append(np.mean(vals))
        print(f"{theta:.4f}," + ",".join(f"{m:.4f}" for m in means), flush=True)


if __name__ == "__main__":
    main()
