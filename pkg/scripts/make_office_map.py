"""Rasterize a synthetic 32x32 office-style occupancy map (stand-in for a scanned floor plan).

Usage: python scripts/make_office_map.py [--out maps/office32.pgm] [--seed 3]

Real building maps (e.g. Radish occupancy images) can be used instead: export
them as 8-bit PGM with free space light and walls dark, then pass
``--downsample`` to the CLI so that one grid cell covers roughly one robot
footprint.
"""

import argparse

import numpy as np

from transnet import gridworld as gw


def office_map(size=32, seed=3):
    rng = np.random.default_rng(seed)
    cells = np.zeros((size, size), dtype=np.int32)
    cells[[0, -1], :] = 1
    cells[:, [0, -1]] = 1
    # two horizontal walls split the floor into three bands joined by a corridor
    for row in (size // 3, 2 * size // 3):
        cells[row, 1:-1] = 1
        for door in rng.choice(np.arange(2, size - 2), size=3, replace=False):
            cells[row, door] = 0
    # vertical room dividers with one doorway each
    for col in (8, 16, 24):
        for lo, hi in ((1, size // 3), (size // 3 + 1, 2 * size // 3), (2 * size // 3 + 1, size - 1)):
            if rng.random() < 0.7:
                cells[lo:hi, col] = 1
                cells[rng.integers(lo, hi), col] = 0
    # furniture clutter
    free = np.argwhere(cells == 0)
    for y, x in free[rng.choice(len(free), size=40, replace=False)]:
        cells[y, x] = 1
    if not gw.is_connected(cells):
        labels, n = gw.components(cells)
        keep = np.argmax(np.bincount(labels[labels > 0])[1:]) + 1
        cells[(labels != keep) & (cells == 0)] = 1
    return gw.GridMap(cells)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="maps/office32.pgm")
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--size", type=int, default=32)
    args = ap.parse_args()
    gmap = office_map(args.size, args.seed)
    gw.save_map(args.out, gmap)
    print(f"wrote {args.out}: {int((gmap.cells == 0).sum())} free cells")
    for row in gmap.cells:
        print("".join("#" if v else "." for v in row))


if __name__ == "__main__":
    main()
