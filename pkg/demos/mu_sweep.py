"""Sweep the fusion weight on a small seeded suite and print EAO and failures.

    python3 demos/mu_sweep.py [--count 12] [--length 80]
"""
import argparse
from dataclasses import replace

import numpy as np

from dualtrack.bench import SUITE_SIM, make_suite, run_suite
from dualtrack.evaluation import accuracy_robustness, eao_lite
from dualtrack.tracker import TrackerConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=12)
    ap.add_argument("--length", type=int, default=80)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    suite = make_suite(args.count, args.seed, replace(SUITE_SIM, length=args.length))
    print(f"{'mu':>5} {'eao':>7} {'acc':>7} {'fail':>5}")
    for mu in np.round(np.linspace(0.0, 1.0, 11), 1):
        recs = run_suite(TrackerConfig(mu=float(mu)), suite, "reset")
        acc, _ = accuracy_robustness(recs)
        fails = sum(len(r.failures) for r in recs)
        print(f"{mu:5.1f} {eao_lite(recs):7.4f} {acc:7.4f} {fails:5d}")


if __name__ == "__main__":
    main()
