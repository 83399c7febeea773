"""TransNet vs the uniform baseline on held-out stochastic 8x8 grids.

Trains (or loads from the cache) both models on 400 environments x 5 expert
demonstrations, evaluates them with the expert on 250 paired scenarios and
exports the South planner kernels for classes 0 and 2.

Usage: python scripts/grid_comparison.py [--trials 250] [--out results/grid]
"""

import argparse
import logging
from pathlib import Path

from transnet import evalharness as ev
from transnet import experiments as ex
from transnet import gridworld as gw


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=250)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="results/grid")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    spec = ex.grid_spec()
    models = ex.pair(spec)
    for label, m in models.items():
        r = m.report
        print(f"{label}: best epoch {r['best_epoch']} of {len(r['val_loss'])}, "
              f"val loss {r['val_loss'][r['best_epoch'] - 1]:.4f}, val acc {r['val_acc'][r['best_epoch'] - 1]:.3f}")
    table, _ = ex.paired_comparison(models, spec.data.domain, args.trials, args.seed)
    print(ev.format_table(table), end="")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(ev.format_table(table))
    tn = models["transnet"]
    for cls in (0, 2):
        m = ev.export_kernels(tn.params, tn.net.config, gw.SOUTH, cls, out / f"south_c{cls}.pgm")
        print(f"planner kernel, action south, class {cls}:")
        for row in m:
            print("  " + " ".join(f"{v:.3f}" for v in row))


if __name__ == "__main__":
    main()
