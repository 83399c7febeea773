"""QMDP expert success rate on 10x10 random grids, both noise profiles.

Usage: python scripts/expert_quality.py [--trials 100]
"""

import argparse

from transnet import evalharness as ev
from transnet import qmdp_expert as qe


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    print("profile,SR,TL,CR,episodes")
    for stochastic in (False, True):
        domain = qe.DomainConfig(domain="grid", size=10, stochastic=stochastic)
        suite = ev.make_suite(domain, args.trials, args.seed)
        summary = ev.metrics(ev.evaluate(ev.ExpertPolicy(domain.noise), suite))
        print(summary.row("stochastic" if stochastic else "deterministic"))


if __name__ == "__main__":
    main()
