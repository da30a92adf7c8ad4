"""Closed loops at a short horizon: adaptive control horizon, slack monitoring and disturbed updates.

Each config writes its own directory of CSV/JSON output under out/.
"""

import sys
from pathlib import Path

from horizonmpc.cli import main

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ["adaptive_short.json", "slack_monitor.json", "update_disturbed.json"]

if __name__ == "__main__":
    worst = 0
    for name in CONFIGS:
        cfg = ROOT / "configs" / name
        print(f"== {name}")
        worst = max(worst, main(["simulate", "--config", str(cfg), "--out", str(ROOT / "out" / cfg.stem)]))
    sys.exit(worst)
