"""Global multi-participant tracker built on the estimation primitives.

Each participant's report is treated as one scan: its observations are
associated against the current tracks with JPDA and folded in with the
weighted unscented update before the next participant is processed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .estimation import (
    FilterConfig,
    Observation,
    TrackState,
    ekf_predict,
    init_track,
    jpda_associate,
    ukf_update,
)


@dataclass(frozen=True)
class AdvertisedSensor:
    kind: str
    fov_deg: float
    range: float
    mount_yaw_deg: float
    a: float
    b: float


@dataclass(frozen=True)
class ParticipantReport:
    """One participant's decided contribution to a round."""

    sender: str
    role: str
    pose: tuple[float, float, float]  # reported x, y, heading (rad)
    loc_cov: tuple[tuple[float, float], tuple[float, float]]
    sensors: tuple[AdvertisedSensor, ...]
    observations: tuple[Observation, ...]
    self_obs: Observation | None = None

    def all_observations(self) -> list[Observation]:
        return list(self.observations) + ([self.self_obs] if self.self_obs is not None else [])


@dataclass
class ScanAssociation:
    """Per-participant association of one round: observation list, JPDA
    weights keyed (track id, index), and hard matches index -> track id."""

    observations: list[Observation]
    weights: dict[tuple[int, int], float]
    matches: dict[int, int] = field(default_factory=dict)


@dataclass
class TrackerState:
    tracks: list[TrackState]
    next_id: int = 1
    last_seen: dict[int, float] = field(default_factory=dict)


MATCH_WEIGHT = 0.5
BIRTH_RADIUS = 0.6
MAX_COAST = 3.0


def predict_all(state: TrackerState, t: float, cfg: FilterConfig) -> list[TrackState]:
    return [ekf_predict(trk, max(0.0, t - trk.last_update), cfg) for trk in state.tracks]


def associate_and_update(
    tracks: list[TrackState],
    reports: dict[str, ParticipantReport],
    trust: Callable[[str], float],
    cfg: FilterConfig,
    keep: Callable[[str, int], bool] | None = None,
    prior: dict[str, ScanAssociation] | None = None,
) -> tuple[list[TrackState], dict[str, ScanAssociation]]:
    """Sequentially fold every participant's scan into ``tracks``.

    With ``prior`` the stored weights are reused instead of re-associating,
    and ``keep(sender, index)`` filters which observations take part.
    """
    cur = {trk.id: trk for trk in tracks}
    order = [trk.id for trk in tracks]
    scans: dict[str, ScanAssociation] = {}
    for sender in sorted(reports):
        if prior is not None:
            if sender not in prior:
                continue
            scan = prior[sender]
        else:
            obs = reports[sender].all_observations()
            res = jpda_associate([cur[i] for i in order], obs, cfg.gate, cfg)
            scan = ScanAssociation(obs, dict(res.weights))
            for j in range(len(obs)):
                best, best_w = None, MATCH_WEIGHT
                for (tid, jj), w in res.weights.items():
                    if jj == j and w > best_w:
                        best, best_w = tid, w
                if best is not None:
                    scan.matches[j] = best
        scans[sender] = scan
        s = trust(sender)
        per_track: dict[int, list] = {}
        for (tid, j), w in scan.weights.items():
            if keep is not None and not keep(sender, j):
                continue
            per_track.setdefault(tid, []).append((scan.observations[j], w, s))
        for tid, items in per_track.items():
            if tid in cur:
                cur[tid] = ukf_update(cur[tid], items, cfg)
    return [cur[i] for i in order], scans


def births(
    state: TrackerState,
    scans: dict[str, ScanAssociation],
    t: float,
    cfg: FilterConfig,
    keep: Callable[[str, int], bool] | None = None,
    min_senders: int = 2,
) -> list[TrackState]:
    """New tracks from unmatched observations that at least ``min_senders``
    distinct participants agree on (within BIRTH_RADIUS)."""
    loose: list[Observation] = []
    for sender in sorted(scans):
        scan = scans[sender]
        for j, o in enumerate(scan.observations):
            if j in scan.matches or any(w > 0.05 for (tid, jj), w in scan.weights.items() if jj == j):
                continue
            if keep is not None and not keep(sender, j):
                continue
            loose.append(o)
    clusters: list[list[Observation]] = []
    for o in loose:
        for c in clusters:
            cx = np.mean([m.z for m in c], axis=0)
            if np.hypot(*(o.z - cx)) <= BIRTH_RADIUS and all(m.sender != o.sender for m in c):
                c.append(o)
                break
        else:
            clusters.append([o])
    born = []
    for c in clusters:
        if len({m.sender for m in c}) < min_senders:
            continue
        trk = init_track(state.next_id, c[0], t, cfg)
        trk = ukf_update(trk, [(m, 1.0, 1.0) for m in c[1:2]], cfg)
        for m in c[2:]:
            trk = ukf_update(trk, [(m, 1.0, 1.0)], cfg)
        state.last_seen[state.next_id] = t
        state.next_id += 1
        born.append(trk)
    return born


def prune(state: TrackerState, tracks: list[TrackState], scans: dict[str, ScanAssociation], t: float) -> list[TrackState]:
    for scan in scans.values():
        for tid in scan.matches.values():
            state.last_seen[tid] = t
    alive = [trk for trk in tracks if t - state.last_seen.get(trk.id, t) <= MAX_COAST]
    for trk in tracks:
        if trk not in alive:
            state.last_seen.pop(trk.id, None)
    return alive


def fuse_round(state: TrackerState, reports: dict[str, ParticipantReport], t: float, cfg: FilterConfig) -> TrackerState:
    """Plain fusion with every report at face value (no trust scoring)."""
    predicted = predict_all(state, t, cfg)
    tracks, scans = associate_and_update(predicted, reports, lambda s: 1.0, cfg)
    tracks = prune(state, tracks, scans, t)
    tracks += births(state, scans, t, cfg)
    state.tracks = [_stamp(trk, t) for trk in tracks]
    return state


def _stamp(trk: TrackState, t: float) -> TrackState:
    return replace(trk, last_update=t)


def match_truth(tracks: list[TrackState], truth: dict, gate: float = 2.0) -> list[float]:
    """Nearest-neighbour errors (metres) pairing each truth object with the
    closest unused track inside ``gate``."""
    errs = []
    pairs = []
    for oid, s in truth.items():
        for k, trk in enumerate(tracks):
            d = math.hypot(trk.mean[0] - s.x, trk.mean[1] - s.y)
            if d <= gate:
                pairs.append((d, oid, k))
    pairs.sort()
    used_o, used_t = set(), set()
    for d, oid, k in pairs:
        if oid in used_o or k in used_t:
            continue
        used_o.add(oid)
        used_t.add(k)
        errs.append(d)
    return errs
