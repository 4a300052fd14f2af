"""Scenario runner, detection and accuracy metrics, result persistence and
parameter sweeps.

One scenario drives, per round: ground truth, token upkeep, sensing (with
any injected fault), consensus over the signed sensing reports, and trust
scoring on the decided set.  A parallel fusion without trust runs on the
same decided set so both accuracies come from identical inputs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .auth import (
    RSU,
    AuthAgent,
    Authority,
    AuthorityKeys,
    PeerVerifier,
    make_broadcast,
)
from .config import ScenarioConfig
from .consensus import (
    Behaviour,
    ConsensusNode,
    DropOnePacket,
    Replayer,
    canonical,
    run_consensus_round,
    split_signed,
)
from .estimation import Observation
from .fusion import AdvertisedSensor, ParticipantReport, TrackerState, fuse_round, match_truth
from .trust import TrustLedger, score_round
from .world import (
    COMM_FAULTS,
    FAULT,
    KEYS,
    NET,
    SCHEDULE,
    FaultSpec,
    ParticipantSpec,
    SensedReport,
    World,
    inject_fault,
    rng_stream,
    sense_world,
)

log = logging.getLogger(__name__)

RESULT_SCHEMA = 1
DETECTION_FACTOR = 1.2
DETECTION_WINDOW = 60.0
BASELINE_WINDOW = 30.0


# --------------------------------------------------------------------------
# metrics


def compute_mttd(
    series: list[tuple[float, float]],
    inject_at: float,
    baseline_window: float = BASELINE_WINDOW,
    window: float = DETECTION_WINDOW,
    factor: float = DETECTION_FACTOR,
) -> tuple[bool, float | None]:
    """First time after ``inject_at`` the score reaches ``factor`` times its
    pre-injection mean, if that happens within ``window`` seconds.

    ``series`` holds (time, score) pairs in time order.
    """
    if not series or series[0][0] > inject_at - baseline_window:
        raise ValueError("trust series does not cover the baseline window")
    base = [s for t, s in series if inject_at - baseline_window <= t <= inject_at]
    if not base:
        raise ValueError("no samples inside the baseline window")
    threshold = factor * (sum(base) / len(base))
    for t, s in series:
        if inject_at < t <= inject_at + window and s >= threshold:
            return True, t - inject_at
    return False, None


def compute_rmse(errors: Iterable[float]) -> float | None:
    """Root-mean-square of per-match position errors; None with no matches."""
    e = np.asarray(list(errors), dtype=float)
    if e.size == 0:
        return None
    return float(math.sqrt(float(np.mean(e * e))))


# --------------------------------------------------------------------------
# wire encoding of sensing reports


def encode_report(rep: SensedReport, spec: ParticipantSpec, round_num: int, t: float) -> dict:
    def ob(o: Observation):
        (a, b), (_, d) = o.cov
        return [o.position[0], o.position[1], a, b, d, o.radius, o.kind]

    obs = [ob(o) for o in rep.observations]
    if rep.self_report is not None:
        obs.append(ob(rep.self_report))
    lc = rep.loc_cov
    return {
        "type": "sensing",
        "sender": spec.id,
        "round": round_num,
        "t": t,
        "role": spec.role,
        "pose": list(rep.reported_pose),
        "loc_cov": [float(lc[0][0]), float(lc[0][1]), float(lc[1][1])],
        "sensors": [[s.kind, s.fov_deg, s.range, s.mount_yaw_deg, s.a, s.b] for s in spec.sensors],
        "obs": obs,
    }


def decode_report(body: dict) -> ParticipantReport:
    sender, t = body["sender"], float(body["t"])
    objs, self_obs = [], None
    for x, y, a, b, d, radius, kind in body["obs"]:
        o = Observation(sender, (float(x), float(y)), ((a, b), (b, d)), "fused", t, float(radius), kind)
        if kind == "self" and self_obs is None:
            self_obs = o
        elif kind == "object":
            objs.append(o)
    a, b, d = body["loc_cov"]
    return ParticipantReport(
        sender,
        body["role"],
        tuple(float(v) for v in body["pose"]),
        ((a, b), (b, d)),
        tuple(AdvertisedSensor(*s) for s in body["sensors"]),
        tuple(objs),
        self_obs,
    )


def scale_report(rep: ParticipantReport, scale: float) -> ParticipantReport:
    """Global-fusion covariance tampering for one participant."""
    if scale == 1.0:
        return rep
    objs = tuple(o.with_cov(o.R * scale) for o in rep.observations)
    self_obs = rep.self_obs.with_cov(rep.self_obs.R * scale) if rep.self_obs is not None else None
    return replace(rep, observations=objs, self_obs=self_obs)


class CorruptChallenge(Behaviour):
    """Broadcasts with a tampered challenge value."""

    def auth_out(self, node, round_num):
        cred = node.agent.credential
        bad = replace(cred, chal_c=bytes([cred.chal_c[0] ^ 0xFF]) + cred.chal_c[1:])
        return [make_broadcast(bad, node.agent.token, node.agent.entropy(16)).to_bytes()]


# --------------------------------------------------------------------------
# results


@dataclass
class RunResult:
    scenario: str
    seed: int
    fault: dict | None
    inject_at: float | None
    detected: bool
    mttd: float | None
    detected_by: str | None
    rmse_with_trust: float | None
    rmse_without_trust: float | None
    rounds: int
    rounds_contested: int
    auth_rejects: int
    agreement_violations: int
    alarms: dict[str, bool]
    steady_trust: dict[str, float]
    final_trust: dict[str, float]
    config_digest: str
    error: str | None = None

    def to_record(self) -> dict:
        return {"schema": RESULT_SCHEMA, **dataclasses.asdict(self)}

    @classmethod
    def from_record(cls, rec: dict) -> "RunResult":
        rec = dict(rec)
        if rec.pop("schema", None) != RESULT_SCHEMA:
            raise ValueError("unsupported result schema")
        return cls(**rec)


@dataclass
class Simulation:
    """Everything one run produces; ``result`` is the summary record."""

    result: RunResult
    trust_series: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    snapshots: list[dict] = field(default_factory=list)
    decisions: list[dict] = field(default_factory=list)


def config_digest(cfg: ScenarioConfig) -> str:
    doc = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def reported_tracks(state: TrackerState, t: float) -> list:
    """Tracks refreshed by at least one observation this round; coasting
    tracks are kept internally but not reported."""
    return [trk for trk in state.tracks if state.last_seen.get(trk.id) == t]


def resolve_inject_at(cfg: ScenarioConfig, seed: int) -> float:
    if cfg.fault is not None and cfg.fault.inject_at is not None:
        return float(cfg.fault.inject_at)
    lo, hi = cfg.inject_window
    return float(rng_stream(seed, 0, SCHEDULE).uniform(lo, hi))


# --------------------------------------------------------------------------
# scenario driver


class _Entropy:
    def __init__(self, rng: np.random.Generator):
        self._rng = rng

    def __call__(self, n: int) -> bytes:
        return self._rng.bytes(n)


def simulate(cfg: ScenarioConfig, seed: int) -> Simulation:
    world = World(cfg.world)
    specs = {p.id: p for p in cfg.world.participants}
    pids = sorted(specs)
    inject_at = resolve_inject_at(cfg, seed)
    fault = replace(cfg.fault, inject_at=inject_at) if cfg.fault is not None else None
    target = fault.target if fault is not None else None

    entropy = _Entropy(rng_stream(seed, 0, KEYS))
    authority = Authority(AuthorityKeys(entropy(32), entropy(32)), entropy, cfg.auth)
    rsu = RSU("rsu0", cfg.rsu_position, authority.rsu_material(), entropy(32), entropy, cfg.auth)
    rsu.receive_round_signature(authority.first_round_signature(0.0))
    nodes: dict[str, ConsensusNode] = {}
    for pid in pids:
        cred = authority.provision_vehicle(entropy(16))
        verifier = PeerVerifier({rsu.id: rsu.public}, cfg.auth)
        nodes[pid] = ConsensusNode(pid, AuthAgent(cred, verifier, entropy))

    tracker = TrackerState([])
    plain = TrackerState([])
    ledger = TrustLedger(cfg.trust.buffer_len, cfg.trust.cold_start_frames)
    series: dict[str, list[tuple[float, float]]] = {p: [] for p in pids}
    sim = Simulation(result=None)  # type: ignore[arg-type]
    errs_trust: list[float] = []
    errs_plain: list[float] = []
    contested = rejects = violations = 0
    protocol_hit: float | None = None
    stale_applied = False
    n_rounds = int(math.floor(cfg.horizon / cfg.round_period + 1e-9))

    for k in range(1, n_rounds + 1):
        t = k * cfg.round_period
        truth = world.state_at(t)
        active = fault is not None and fault.active(t)

        # token upkeep
        if t - rsu.round_sig.issued_at > cfg.auth.expiration_time:
            rsu.receive_round_signature(authority.refresh_round_signature(rsu.round_sig, t))
        for pid in pids:
            agent = nodes[pid].agent
            pos = truth[pid].pos if pid in truth else tuple(specs[pid].pose[:2])
            if active and pid == target and fault.error_id == "E11" and not stale_applied:
                agent.token = rsu.issue_stale_token(agent.credential, rsu.round_sig, t - 2 * cfg.auth.expiration_time)
                agent.frozen = True
                stale_applied = True
                continue
            stale = agent.token is not None and agent.token.bound_round < rsu.round_sig.round_num
            if agent.needs_renewal(t, cfg.auth) or (stale and not agent.frozen):
                sealed = rsu.issue_token(agent.renewal_request(), pos, t)
                if sealed is not None:
                    agent.accept_sealed_token(sealed)

        # protocol-level misbehaviour
        if active and target is not None:
            idx = world.index[target]
            if fault.error_id == "E10":
                nodes[target].behaviour = CorruptChallenge()
            elif fault.error_id == "E12":
                nodes[target].behaviour = DropOnePacket(lambda r, idx=idx: rng_stream(seed, idx, r, FAULT, 12))
            elif fault.error_id == "E13":
                victim = pids[(pids.index(target) + 1) % len(pids)]
                nodes[target].behaviour = Replayer(victim)

        bodies = {}
        for pid in pids:
            fx = inject_fault(fault, pid, t)
            rep = sense_world(world, specs[pid], truth, t, seed, k, fx)
            bodies[pid] = encode_report(rep, specs[pid], k, t)

        out = run_consensus_round(nodes, bodies, k, t, cfg.link, rng_stream(seed, 0, k, NET), cfg.consensus)
        rejects += len(out.ctx.auth_rejects)
        honest = [p for p in out.ctx.registered if p != target]
        views = {p: out.decisions[p].canonical_bytes() for p in honest}
        if len(set(views.values())) > 1:
            violations += 1
        if not honest:
            continue
        view = out.decisions[honest[0]]
        if any(view.contested.values()):
            contested += 1
        sim.decisions.append(
            {
                "schema": RESULT_SCHEMA,
                "round": k,
                "t": t,
                "view": honest[0],
                "registered": out.ctx.registered,
                "excluded": out.ctx.excluded,
                "decided": view.decided_hashes(),
                "contested": {s: view.contested[s] for s in sorted(view.contested)},
                "missing": {s: view.missing.get(s, 0) for s in sorted(view.missing)},
            }
        )

        if active and protocol_hit is None and fault.error_id in COMM_FAULTS:
            if target in out.ctx.excluded or view.missing.get(target, 0) > 0 or view.contested.get(target, False):
                protocol_hit = t

        reports: dict[str, ParticipantReport] = {}
        for slot, raw in sorted(view.decided.items()):
            if raw is None:
                continue
            try:
                rep = decode_report(split_signed(raw)[2])
            except (KeyError, TypeError, ValueError) as exc:
                log.warning("round %d: undecodable report in slot %s: %s", k, slot, exc)
                continue
            if rep.sender != slot:
                continue
            scale = inject_fault(fault, slot, t).global_cov_scale
            reports[slot] = scale_report(rep, scale)

        ledger, tracker, rec = score_round(reports, tracker, ledger, cfg.trust, t, cfg.filter)
        plain = fuse_round(plain, reports, t, cfg.filter)
        if fault is None or t > inject_at:
            errs_trust += match_truth(reported_tracks(tracker, t), truth)
            errs_plain += match_truth(reported_tracks(plain, t), truth)

        for p in pids:
            s = ledger.score(p)
            series[p].append((t, s))
            sim.snapshots.append(
                {
                    "schema": RESULT_SCHEMA,
                    "round": k,
                    "participant": p,
                    "trust": s,
                    "frames": len(rec.frames.get(p, ())) + rec.penalties.get(p, 0),
                    "excluded": p in rec.excluded or p not in reports,
                }
            )

    alarms = {}
    for p in pids:
        try:
            alarms[p] = compute_mttd(series[p], inject_at)[0]
        except ValueError:
            alarms[p] = False
    detected, mttd, by = False, None, None
    if fault is None:
        detected = any(alarms.values())
    else:
        try:
            detected, mttd = compute_mttd(series[target], inject_at)
        except ValueError:
            detected, mttd = False, None
        if detected:
            by = "trust"
        if protocol_hit is not None and protocol_hit - inject_at <= DETECTION_WINDOW:
            if mttd is None or protocol_hit - inject_at < mttd:
                detected, mttd, by = True, protocol_hit - inject_at, "protocol"

    half = n_rounds // 2
    steady = {p: float(np.mean([s for _, s in series[p][half:]])) if series[p] else 1.0 for p in pids}
    sim.trust_series = series
    sim.result = RunResult(
        scenario=cfg.name,
        seed=seed,
        fault=dataclasses.asdict(fault) if fault is not None else None,
        inject_at=inject_at if fault is not None else None,
        detected=bool(detected),
        mttd=mttd,
        detected_by=by,
        rmse_with_trust=compute_rmse(errs_trust),
        rmse_without_trust=compute_rmse(errs_plain),
        rounds=n_rounds,
        rounds_contested=contested,
        auth_rejects=rejects,
        agreement_violations=violations,
        alarms=alarms,
        steady_trust=steady,
        final_trust={p: ledger.score(p) for p in pids},
        config_digest=config_digest(cfg),
    )
    return sim


def run_scenario(cfg: ScenarioConfig, seed: int) -> RunResult:
    return simulate(cfg, seed).result


# --------------------------------------------------------------------------
# persistence


def _jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def write_simulation(sim: Simulation, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _jsonl(out / "runs.jsonl", [sim.result.to_record()])
    _jsonl(out / "trust.jsonl", sim.snapshots)
    _jsonl(out / "decisions.jsonl", sim.decisions)
    write_summary(summarize([sim.result]), out / "summary.csv")
    return out


def read_runs(path: str | Path) -> list[RunResult]:
    with open(path, encoding="utf-8") as fh:
        return [RunResult.from_record(json.loads(line)) for line in fh if line.strip()]


SUMMARY_FIELDS = (
    "schema", "error_id", "magnitude", "runs", "failed", "detected", "detection_rate", "mean_mttd",
    "rmse_with_trust", "rmse_without_trust", "rmse_improvement",
)


def _cell(r: RunResult) -> tuple[str, float]:
    if r.fault is None:
        return ("none", 0.0)
    return (r.fault["error_id"], float(r.fault["magnitude"]))


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def summarize(results: Iterable[RunResult]) -> list[dict]:
    """Per (error id, magnitude) aggregate; rows sorted by cell."""
    cells: dict[tuple[str, float], list[RunResult]] = {}
    for r in results:
        cells.setdefault(_cell(r), []).append(r)
    rows = []
    for (eid, mag), rs in sorted(cells.items(), key=lambda kv: (int(kv[0][0][1:]) if kv[0][0] != "none" else 0, kv[0][1])):
        ok = [r for r in rs if r.error is None]
        det = sum(r.detected for r in ok)
        rw = _mean([r.rmse_with_trust for r in ok])
        ro = _mean([r.rmse_without_trust for r in ok])
        rows.append(
            {
                "schema": RESULT_SCHEMA,
                "error_id": eid,
                "magnitude": mag,
                "runs": len(rs),
                "failed": len(rs) - len(ok),
                "detected": det,
                "detection_rate": det / len(ok) if ok else None,
                "mean_mttd": _mean([r.mttd for r in ok]),
                "rmse_with_trust": rw,
                "rmse_without_trust": ro,
                "rmse_improvement": (ro - rw) / ro if rw is not None and ro else None,
            }
        )
    return rows


def write_summary(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k]) for k in SUMMARY_FIELDS})


def report(runs_path: str | Path, out_csv: str | Path | None = None) -> list[dict]:
    rows = summarize(read_runs(runs_path))
    if out_csv is not None:
        write_summary(rows, out_csv)
    return rows


# --------------------------------------------------------------------------
# sweeps


def _run_cell(args) -> RunResult:
    cfg, seed = args
    try:
        return run_scenario(cfg, seed)
    except Exception as exc:  # recorded per cell; the sweep carries on
        log.exception("run failed: %s seed %d", cfg.name, seed)
        return RunResult(
            cfg.name, seed, dataclasses.asdict(cfg.fault) if cfg.fault else None, None, False, None, None,
            None, None, 0, 0, 0, 0, {}, {}, {}, config_digest(cfg), error=f"{type(exc).__name__}: {exc}",
        )


def sweep(
    template: ScenarioConfig,
    grid: Iterable[tuple[str, float]],
    seeds: Iterable[int],
    target: str = "cav1",
    workers: int = 1,
    inject_at: float | None = None,
) -> list[RunResult]:
    """Cartesian product of fault cells and seeds.  Results come back in
    (cell, seed) order whatever the worker count."""
    jobs = []
    for eid, mag in grid:
        fault = None if eid == "none" else FaultSpec(eid, target, mag, inject_at)
        for seed in seeds:
            jobs.append((template.with_fault(fault), int(seed)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]


def write_sweep(results: list[RunResult], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _jsonl(out / "runs.jsonl", [r.to_record() for r in results])
    write_summary(summarize(results), out / "summary.csv")
    return out


__all__ = [
    "RunResult",
    "Simulation",
    "compute_mttd",
    "compute_rmse",
    "run_scenario",
    "simulate",
    "sweep",
    "summarize",
    "report",
    "write_simulation",
    "write_sweep",
    "read_runs",
    "canonical",
]
