"""Detection sweep over the fault catalogue.

Runs every error id at a representative magnitude against one target and
writes runs.jsonl and summary.csv under --out.

    python3 scripts/detection_sweep.py --seeds 0-9 --out results/detection
"""

import argparse
import json

from v2xtrust.cli import _grid, _seeds
from v2xtrust.config import ScenarioConfig, load_config
from v2xtrust.harness import summarize, sweep, write_sweep

DEFAULT_GRID = "E1:2;E2:1;E3:1;E4:0.5;E5:0.5;E6:0.5;E7:300;E8:50;E9:90;E10:1;E11:1;E12:1;E13:1;E14:2"


def main() -> None:
    ap = argparse.ArgumentParser(description="fault catalogue detection sweep")
    ap.add_argument("--config")
    ap.add_argument("--grid", type=_grid, default=_grid(DEFAULT_GRID))
    ap.add_argument("--seeds", type=_seeds, default=list(range(10)))
    ap.add_argument("--target", default="cav1")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="results/detection")
    args = ap.parse_args()

    base = load_config(args.config) if args.config else ScenarioConfig()
    results = sweep(base, args.grid, args.seeds, target=args.target, workers=args.workers)
    write_sweep(results, args.out)
    for row in summarize(results):
        print(json.dumps(row, sort_keys=True))


if __name__ == "__main__":
    main()
