"""Grid-trained models on the 32x32 office map, deterministic and stochastic.

Usage: python scripts/generalization.py [--map maps/office32.pgm] [--trials 25]
"""

import argparse
import logging

from transnet import experiments as ex
from transnet import gridworld as gw


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--map", default=None, help="occupancy map (default: the shipped office map)")
    ap.add_argument("--downsample", type=int, default=1)
    ap.add_argument("--trials", type=int, default=25)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    gmap = gw.load_map(args.map, args.downsample) if args.map else ex.office_map()
    models = ex.pair(ex.grid_spec())
    print("profile,policy,SR,TL,CR,episodes")
    for name, noise in (("deterministic", gw.DETERMINISTIC), ("stochastic", gw.STOCHASTIC)):
        res = ex.generalization(models, gmap, noise, args.trials, args.seed)
        for label, summary in res.items():
            print(f"{name},{summary.row(label)}")


if __name__ == "__main__":
    main()
