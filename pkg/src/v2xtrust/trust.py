"""Post-consensus trust scoring.

Byzantine-tolerant existence voting, the standard-deviation score (SDS)
per matched observation, rule-of-three gating, missed-detection penalty
frames, minimum-capability enforcement and the revolving-buffer ledger.
A participant's trust score is the mean of its SDS buffer; larger is worse.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .estimation import FilterConfig, Observation, TrackState, cov_sqrt, eig_sorted, hypotenuse
from .fusion import (
    ParticipantReport,
    ScanAssociation,
    TrackerState,
    associate_and_update,
    births,
    predict_all,
    prune,
)
from .world import visible_fraction, wrap_angle


@dataclass(frozen=True)
class TrustConfig:
    sds_max: float = 3.0
    buffer_len: int = 30
    min_sensor_accuracy: float = 0.05
    min_range: float = 3.0
    min_fov: float = 60.0
    max_sensor_error: float = 1.0
    max_localization_error: float = 0.5
    visibility_threshold: float = 0.5
    eps: float = 1e-3
    cold_start_frames: int = 5
    # "std": feed principal standard deviations to the score; "variance": raw eigenvalues
    spread: str = "std"

    def __post_init__(self):
        for name in ("sds_max", "min_sensor_accuracy", "min_range", "min_fov", "max_sensor_error",
                     "max_localization_error", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.buffer_len < 1:
            raise ValueError("buffer_len must be >= 1")
        if not 0 < self.visibility_threshold <= 1:
            raise ValueError("visibility_threshold must lie in (0, 1]")
        if self.spread not in ("std", "variance"):
            raise ValueError("spread must be 'std' or 'variance'")

    @property
    def rho(self) -> float:
        """Missed-detection frame value."""
        return 3 * self.min_sensor_accuracy


class TrustLedger:
    """Revolving SDS buffer per participant."""

    def __init__(self, capacity: int = 30, cold_start_frames: int = 5):
        self.capacity = capacity
        self.cold_start_frames = cold_start_frames
        self._buf: dict[str, deque] = {}

    def copy(self) -> "TrustLedger":
        other = TrustLedger(self.capacity, self.cold_start_frames)
        other._buf = {p: deque(b, maxlen=self.capacity) for p, b in self._buf.items()}
        return other

    def push(self, participant: str, value: float) -> None:
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"SDS frame must be finite and non-negative, got {value}")
        self._buf.setdefault(participant, deque(maxlen=self.capacity)).append(float(value))

    def frames(self, participant: str) -> list[float]:
        return list(self._buf.get(participant, ()))

    def score(self, participant: str) -> float:
        b = self._buf.get(participant)
        if not b or len(b) < self.cold_start_frames:
            return 1.0
        return sum(b) / len(b)

    def participants(self) -> list[str]:
        return sorted(self._buf)

    def untrusted(self, participant: str, sds_max: float) -> bool:
        return self.score(participant) > sds_max


# --------------------------------------------------------------------------
# SDS


def calc_sds(mu, sigma, x_hat, p, eps: float = 1e-3) -> float:
    """Distance between reported and fused position over the distance
    between the reported and fused spread eigenvalues.

    ``sigma`` and ``p`` are 2x2 PSD spread matrices; their sorted
    eigenvalues enter the denominator, floored at ``eps``.
    """
    s0, s1 = eig_sorted(sigma)
    f0, f1 = eig_sorted(p)
    num = math.hypot(float(mu[0]) - float(x_hat[0]), float(mu[1]) - float(x_hat[1]))
    den = math.hypot(s0 - f0, s1 - f1)
    return num / max(eps, den)


def sds_frame(obs: Observation, track: TrackState, cfg: TrustConfig) -> float:
    if cfg.spread == "std":
        return calc_sds(obs.z, cov_sqrt(obs.R), track.position, cov_sqrt(track.position_cov), cfg.eps)
    return calc_sds(obs.z, obs.R, track.position, track.position_cov, cfg.eps)


def rule_of_three_gate(matched_count: int, sigma_alpha, p_track) -> bool:
    """At least three matched sensors, and the fused estimate at least three
    times as accurate as the contributor's own claim."""
    return matched_count >= 3 and hypotenuse(p_track) <= hypotenuse(sigma_alpha) / 3


# --------------------------------------------------------------------------
# existence voting


@dataclass
class TallyEntry:
    eligible: set[str] = field(default_factory=set)
    yes: set[str] = field(default_factory=set)

    @property
    def exists(self) -> bool:
        return bool(self.eligible) and len(self.yes & self.eligible) * 2 > len(self.eligible)


ExistenceTally = dict


def covers(report: ParticipantReport, target, occluders, cfg: TrustConfig) -> bool:
    x, y, h = report.pose
    for s in report.sensors:
        dx, dy = target[0] - x, target[1] - y
        d = math.hypot(dx, dy)
        if d == 0 or d > s.range:
            continue
        if s.fov_deg < 360:
            off = wrap_angle(math.atan2(dy, dx) - h - math.radians(s.mount_yaw_deg))
            if abs(off) > math.radians(s.fov_deg) / 2:
                continue
        if visible_fraction((x, y), target, 0.25, occluders) >= cfg.visibility_threshold:
            return True
    return False


def tally_existence(
    tracks: list[TrackState],
    reports: dict[str, ParticipantReport],
    matched: dict[int, dict[str, int]],
    self_tracks: dict[str, int],
    cfg: TrustConfig,
) -> dict[int, TallyEntry]:
    """Majority vote per track among the participants whose sensors should
    see it (FOV, range, modelled occlusion by other tracks)."""
    tally = {}
    for trk in tracks:
        entry = TallyEntry()
        supporters = matched.get(trk.id, {})
        for sender, rep in reports.items():
            own = self_tracks.get(sender)
            if own == trk.id:
                entry.eligible.add(sender)
                entry.yes.add(sender)
                continue
            occl = [(tuple(o.position), o.radius) for o in tracks if o.id not in (trk.id, own)]
            if covers(rep, tuple(trk.position), occl, cfg):
                entry.eligible.add(sender)
                if sender in supporters:
                    entry.yes.add(sender)
        tally[trk.id] = entry
    return tally


def remove_non_byzantine(
    tally: dict[int, TallyEntry], scans: dict[str, ScanAssociation]
) -> set[tuple[str, int]]:
    """Keys (sender, observation index) that survive truncation: those hard
    matched to a track voted into existence.  Orphans are dropped."""
    keep = set()
    for sender, scan in scans.items():
        for j, tid in scan.matches.items():
            entry = tally.get(tid)
            if entry is not None and entry.exists:
                keep.add((sender, j))
    return keep


def missed_detection_penalty(
    tally: dict[int, TallyEntry], matched: dict[int, dict[str, int]], ledger: TrustLedger, cfg: TrustConfig
) -> dict[str, int]:
    """Append rho for every eligible participant that missed an existing,
    rule-of-three-supported track.  Returns frames added per participant."""
    added: dict[str, int] = {}
    for tid, entry in sorted(tally.items()):
        sup = matched.get(tid, {})
        if not entry.exists or len(sup) < 3:
            continue
        for sender in sorted(entry.eligible - set(sup)):
            ledger.push(sender, cfg.rho)
            added[sender] = added.get(sender, 0) + 1
    return added


def enforce_minimums(reports: dict[str, ParticipantReport], ledger: TrustLedger, cfg: TrustConfig) -> dict[str, str]:
    """Participants barred from fusion and attribution, with the reason."""
    out = {}
    for sender, rep in sorted(reports.items()):
        if ledger.untrusted(sender, cfg.sds_max):
            out[sender] = "untrusted"
            continue
        if not rep.sensors:
            out[sender] = "no_sensors"
            continue
        if max(s.range for s in rep.sensors) < cfg.min_range:
            out[sender] = "range"
            continue
        if max(s.fov_deg for s in rep.sensors) < cfg.min_fov:
            out[sender] = "fov"
            continue
        worst = max(s.a + s.b * cfg.min_range for s in rep.sensors)
        if worst > cfg.max_sensor_error or any(hypotenuse(o.R) > cfg.max_sensor_error * math.sqrt(2) for o in rep.observations):
            out[sender] = "sensor_error"
            continue
        if math.sqrt(eig_sorted(rep.loc_cov)[0]) > cfg.max_localization_error:
            out[sender] = "localization_error"
    return out


# --------------------------------------------------------------------------
# full round


@dataclass
class RoundTrustRecord:
    frames: dict[str, list[float]] = field(default_factory=dict)
    penalties: dict[str, int] = field(default_factory=dict)
    excluded: dict[str, str] = field(default_factory=dict)
    tally: dict[int, TallyEntry] = field(default_factory=dict)
    removed: int = 0


def score_round(
    reports: dict[str, ParticipantReport],
    tracker: TrackerState,
    ledger: TrustLedger,
    cfg: TrustConfig,
    t: float,
    filter_cfg: FilterConfig = FilterConfig(),
) -> tuple[TrustLedger, TrackerState, RoundTrustRecord]:
    """Predict, associate, preliminary update, tally, truncate, score,
    enforce minimums and final update, in that order.

    Inputs are not mutated; the returned ledger and tracker are new objects.
    """
    ledger = ledger.copy()
    state = TrackerState(list(tracker.tracks), tracker.next_id, dict(tracker.last_seen))
    rec = RoundTrustRecord()

    rec.excluded = enforce_minimums(reports, ledger, cfg)
    usable = {s: r for s, r in reports.items() if s not in rec.excluded}

    predicted = predict_all(state, t, filter_cfg)
    prelim, scans = associate_and_update(predicted, usable, ledger.score, filter_cfg)

    matched: dict[int, dict[str, int]] = {}
    self_tracks: dict[str, int] = {}
    for sender, scan in scans.items():
        for j, tid in scan.matches.items():
            matched.setdefault(tid, {})[sender] = j
            if scan.observations[j].kind == "self":
                self_tracks[sender] = tid

    rec.tally = tally_existence(predicted, usable, matched, self_tracks, cfg)
    keep = remove_non_byzantine(rec.tally, scans)
    rec.removed = sum(len(s.observations) for s in scans.values()) - len(keep)

    by_id = {trk.id: trk for trk in prelim}
    for tid, entry in sorted(rec.tally.items()):
        sup = matched.get(tid, {})
        if not entry.exists or len(sup) < 3:
            continue
        fused = by_id[tid]
        for sender, j in sorted(sup.items()):
            obs = scans[sender].observations[j]
            if rule_of_three_gate(len(sup), obs.R, fused.position_cov):
                v = sds_frame(obs, fused, cfg)
                ledger.push(sender, v)
                rec.frames.setdefault(sender, []).append(v)
    rec.penalties = missed_detection_penalty(rec.tally, matched, ledger, cfg)

    for sender in usable:
        if ledger.untrusted(sender, cfg.sds_max):
            rec.excluded[sender] = "untrusted"
    final_reports = {s: r for s, r in usable.items() if s not in rec.excluded}
    final_scans = {s: sc for s, sc in scans.items() if s in final_reports}
    tracks, _ = associate_and_update(
        predicted, final_reports, ledger.score, filter_cfg, keep=lambda s, j: (s, j) in keep, prior=final_scans
    )
    kept_scans = {
        s: ScanAssociation(sc.observations, sc.weights, {j: tid for j, tid in sc.matches.items() if (s, j) in keep})
        for s, sc in final_scans.items()
    }
    tracks = prune(state, tracks, kept_scans, t)
    tracks += births(state, final_scans, t, filter_cfg)
    state.tracks = tracks
    return ledger, state, rec
