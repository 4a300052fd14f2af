"""Command line: ``v2xtrust run | sweep | report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ScenarioConfig, load_config
from .harness import report, simulate, summarize, sweep, write_simulation, write_sweep
from .world import ERROR_IDS, ConfigError


def _grid(text: str) -> list[tuple[str, float]]:
    """``E1:1,2,4;E2:1`` -> [(E1, 1.0), (E1, 2.0), (E1, 4.0), (E2, 1.0)]."""
    cells = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        eid, _, mags = part.partition(":")
        eid = eid.strip()
        if eid != "none" and eid not in ERROR_IDS:
            raise ConfigError(f"unknown errorId {eid!r} in grid")
        if eid == "none":
            cells.append(("none", 0.0))
            continue
        if not mags:
            raise ConfigError(f"grid cell {part!r} needs magnitudes")
        cells += [(eid, float(m)) for m in mags.split(",")]
    if not cells:
        raise ConfigError("empty fault grid")
    return cells


def _seeds(text: str) -> list[int]:
    if "-" in text and "," not in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    changes = {}
    if args.horizon is not None:
        changes["horizon"] = args.horizon
    if args.round_period is not None:
        changes["round_period"] = args.round_period
    return replace(cfg, **changes) if changes else cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="v2xtrust", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="scenario YAML (default: built-in intersection)")
        sp.add_argument("--out", default="results", help="output directory")
        sp.add_argument("--horizon", type=float, help="simulated seconds")
        sp.add_argument("--round-period", type=float, help="seconds between consensus rounds")

    r = sub.add_parser("run", help="one scenario")
    common(r)
    r.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sweep", help="fault grid x seeds")
    common(s)
    s.add_argument("--grid", required=True, help="e.g. 'E1:1,2,4,8;E2:1;none'")
    s.add_argument("--seeds", default="0-9", help="'0-9' or '1,5,7'")
    s.add_argument("--target", default="cav1")
    s.add_argument("--inject-at", type=float)
    s.add_argument("--workers", type=int, default=1)

    rep = sub.add_parser("report", help="aggregate a runs.jsonl file")
    rep.add_argument("runs", help="path to runs.jsonl")
    rep.add_argument("--out", help="write summary CSV here")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "run":
            cfg = _load(args)
            sim = simulate(cfg, args.seed)
            out = write_simulation(sim, args.out)
            print(json.dumps(sim.result.to_record(), sort_keys=True))
            print(f"wrote {out}", file=sys.stderr)
        elif args.cmd == "sweep":
            cfg = _load(args)
            results = sweep(cfg, _grid(args.grid), _seeds(args.seeds), args.target, args.workers, args.inject_at)
            out = write_sweep(results, args.out)
            for row in summarize(results):
                print(json.dumps(row, sort_keys=True))
            print(f"wrote {out}", file=sys.stderr)
        elif args.cmd == "report":
            rows = report(args.runs, args.out)
            for row in rows:
                print(json.dumps(row, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
