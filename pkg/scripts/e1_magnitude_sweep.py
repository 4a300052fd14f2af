"""Camera-rotation magnitude sweep: detection rate and MTTD against the
rotation angle.

    python3 scripts/e1_magnitude_sweep.py --angles 1,2,4,8 --seeds 0-9
"""

import argparse

from v2xtrust.cli import _seeds
from v2xtrust.config import ScenarioConfig
from v2xtrust.harness import summarize, sweep, write_sweep


def main() -> None:
    ap = argparse.ArgumentParser(description="E1 magnitude sweep")
    ap.add_argument("--angles", default="1,2,4,8")
    ap.add_argument("--seeds", type=_seeds, default=list(range(10)))
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="results/e1_magnitude")
    args = ap.parse_args()

    grid = [("E1", float(a)) for a in args.angles.split(",")]
    results = sweep(ScenarioConfig(), grid, args.seeds, workers=args.workers)
    write_sweep(results, args.out)
    rows = sorted(summarize(results), key=lambda r: r["magnitude"])
    print(f"{'deg':>5} {'rate':>5} {'mttd':>7} {'rmse gain':>9}")
    for r in rows:
        mttd = "-" if r["mean_mttd"] is None else f"{r['mean_mttd']:.1f}"
        gain = "-" if r["rmse_improvement"] is None else f"{r['rmse_improvement']:.1%}"
        print(f"{r['magnitude']:>5g} {r['detection_rate']:>5.2f} {mttd:>7} {gain:>9}")
    rates = [r["detection_rate"] for r in rows]
    print("monotone" if all(a <= b for a, b in zip(rates, rates[1:])) else "NOT monotone")


if __name__ == "__main__":
    main()
