"""Print alpha on a grid of horizons and control horizons for a stored growth table.

Usage: python scripts/alpha_table.py B.csv [--T-max 3.0] [--step 0.05] [--csv out.csv]
Rows are horizons, columns are control horizons; entries with delta >= T are blank.
"""

import argparse

import numpy as np

from horizonmpc.alpha import multiples, scan_grid
from horizonmpc.growth import GrowthBound

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("table")
    ap.add_argument("--T-max", type=float, default=3.0)
    ap.add_argument("--step", type=float, default=0.05)
    ap.add_argument("--csv", help="write the long-format scan here")
    args = ap.parse_args()

    B = GrowthBound.from_csv(args.table)
    n_max = int(np.floor(min(args.T_max, B.coverage) / args.step + 1e-9))
    Ts = multiples(args.step, 2, n_max)
    deltas = multiples(args.step, 1, n_max - 1)
    scan = scan_grid(B, Ts, deltas)
    Tg, dg, tab = scan.table()
    print("T \\ delta " + " ".join(f"{d:7.2f}" for d in dg))
    for T, row in zip(Tg, tab):
        print(f"{T:9.2f} " + " ".join("       " if np.isnan(a) else f"{a:7.3f}" for a in row))
    if args.csv:
        scan.to_csv(args.csv)
