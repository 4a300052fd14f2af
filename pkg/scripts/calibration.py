"""Steady-state trust in clean runs, and with one participant's actual noise
scaled up while its advertised covariance stays put.

    python3 scripts/calibration.py --seeds 0-9 --noisy cav2 --scale 2
"""

import argparse
import json
import statistics
from dataclasses import replace

from v2xtrust.cli import _seeds
from v2xtrust.config import ScenarioConfig, load_config
from v2xtrust.harness import run_scenario


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=_seeds, default=list(range(10)))
    ap.add_argument("--noisy", default="cav2")
    ap.add_argument("--scale", type=float, default=2.0)
    ap.add_argument("--horizon", type=float)
    args = ap.parse_args()

    base = load_config(args.config) if args.config else ScenarioConfig()
    if args.horizon:
        base = replace(base, horizon=args.horizon)
    noisy_cfg = base.with_noise(args.noisy, args.scale)

    wins = 0
    band = []
    for seed in args.seeds:
        clean = run_scenario(base, seed)
        noisy = run_scenario(noisy_cfg, seed)
        band.extend(clean.steady_trust.values())
        top = max(noisy.steady_trust, key=noisy.steady_trust.get)
        strict = all(v < noisy.steady_trust[args.noisy] for p, v in noisy.steady_trust.items() if p != args.noisy)
        wins += strict
        print(json.dumps({
            "seed": seed,
            "clean": {p: round(v, 3) for p, v in clean.steady_trust.items()},
            "clean_alarms": [p for p, a in clean.alarms.items() if a],
            "noisy": {p: round(v, 3) for p, v in noisy.steady_trust.items()},
            "top": top,
        }))
    print(json.dumps({
        "clean_min": round(min(band), 3),
        "clean_max": round(max(band), 3),
        "clean_mean": round(statistics.fmean(band), 3),
        "noisy_strictly_highest": f"{wins}/{len(args.seeds)}",
    }))


if __name__ == "__main__":
    main()
