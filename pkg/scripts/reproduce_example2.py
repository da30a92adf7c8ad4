"""Run the generator example end to end: level set, growth table, alpha scans, minimal horizon.

Usage: python scripts/reproduce_example2.py [--out DIR] [--full-scale]
The desk-scale run takes roughly five minutes on one core.
"""

import argparse
import sys
from pathlib import Path

from horizonmpc.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(argv: list[str]) -> None:
    code = main(argv)
    if code != 0:
        sys.exit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "out" / "example2"))
    ap.add_argument("--full-scale", action="store_true")
    args = ap.parse_args()
    common = ["--config", str(ROOT / "configs" / "example2.json"), "--out", args.out]
    if args.full_scale:
        common.append("--full-scale")
    table = str(Path(args.out) / "B.csv")
    run(["growth", *common])
    run(["alpha-scan", *common, "--growth-file", table])
    run(["min-horizon", *common, "--growth-file", table, "--delta", "0.05"])
    run(["min-horizon", *common, "--growth-file", table, "--delta", "half"])
    run(["simulate", *common, "--growth-file", table])
