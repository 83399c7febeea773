"""Static-maze models on static and on dynamic 9x9 mazes (V1 input rendering).

Both networks see only static-maze demonstrations; on dynamic mazes the
closed gate is drawn as an obstacle and the network replans when it moves.

Usage: python scripts/dynamic_maze.py [--trials 250]
"""

import argparse
import logging

from transnet import evalharness as ev
from transnet import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=250)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    spec = ex.maze_spec()
    models = ex.pair(spec)
    for name, domain in (("static", spec.data.domain), ("dynamic-v1", ex.dynamic_domain())):
        table, _ = ex.paired_comparison(models, domain, args.trials, args.seed)
        print(f"# {name}")
        print(ev.format_table(table), end="")


if __name__ == "__main__":
    main()
