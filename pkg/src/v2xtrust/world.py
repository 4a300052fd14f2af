"""Synthetic ground truth for a scaled intersection, parameterised sensor
models for CAVs and CISs, and the E1-E14 fault injector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .estimation import Observation, cov_to_tuple

ERROR_IDS = tuple(f"E{i}" for i in range(1, 15))
COMM_FAULTS = ("E10", "E11", "E12", "E13")

# per-purpose RNG stream tags
NOISE, FAULT, LOCAL, NET, KEYS, SCHEDULE = range(6)


class ConfigError(ValueError):
    pass


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator keyed by (seed, participant, round, purpose...)."""
    return np.random.default_rng([int(seed), *map(int, key)])


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class SensorSpec:
    """``sigma(d) = a + b * d`` radial noise, isotropic in the plane."""

    kind: str
    fov_deg: float
    range: float
    mount_yaw_deg: float = 0.0
    a: float = 0.02
    b: float = 0.01

    def __post_init__(self):
        if self.kind not in ("camera", "lidar"):
            raise ConfigError(f"unknown sensor kind {self.kind!r}")
        if not 0 < self.fov_deg <= 360:
            raise ConfigError("fov_deg must be in (0, 360]")
        if self.a < 0 or self.b < 0 or self.range <= 0:
            raise ConfigError("sensor error model and range must be non-negative")

    def sigma(self, d: float) -> float:
        return self.a + self.b * d

    def advertised_cov(self, d: float, bearing: float = 0.0) -> np.ndarray:
        s = self.sigma(d)
        R = rot(bearing)
        return R @ np.diag([s * s, s * s]) @ R.T

    def covers(self, sensor_pos, heading: float, target) -> bool:
        dx, dy = target[0] - sensor_pos[0], target[1] - sensor_pos[1]
        d = math.hypot(dx, dy)
        if d > self.range or d == 0:
            return False
        if self.fov_deg >= 360:
            return True
        off = wrap_angle(math.atan2(dy, dx) - heading - math.radians(self.mount_yaw_deg))
        return abs(off) <= math.radians(self.fov_deg) / 2


@dataclass(frozen=True)
class LoopTrajectory:
    """Stadium-shaped loop whose first straight passes through ``origin``
    along ``heading_deg``; the return leg lies ``2 * turn_radius`` to the left."""

    origin: tuple[float, float] = (0.0, 0.0)
    heading_deg: float = 0.0
    half_length: float = 8.0
    turn_radius: float = 3.0
    speed: float = 1.0
    phase: float = 0.0

    @property
    def perimeter(self) -> float:
        return 4 * self.half_length + 2 * math.pi * self.turn_radius

    def at(self, t: float) -> tuple[float, float, float, float, float]:
        """(x, y, vx, vy, heading) at time t."""
        L, R, v = self.half_length, self.turn_radius, self.speed
        s = (self.phase + v * t) % self.perimeter
        seg = 2 * L
        arc = math.pi * R
        if s < seg:
            lx, ly, lh = -L + s, 0.0, 0.0
        elif s < seg + arc:
            a = (s - seg) / R
            lx, ly, lh = L + R * math.sin(a), R - R * math.cos(a), a
        elif s < 2 * seg + arc:
            u = s - seg - arc
            lx, ly, lh = L - u, 2 * R, math.pi
        else:
            a = (s - 2 * seg - arc) / R
            lx, ly, lh = -L - R * math.sin(a), R + R * math.cos(a), math.pi + a
        h0 = math.radians(self.heading_deg)
        c, sn = math.cos(h0), math.sin(h0)
        x = self.origin[0] + c * lx - sn * ly
        y = self.origin[1] + sn * lx + c * ly
        hd = wrap_angle(h0 + lh)
        return x, y, v * math.cos(hd), v * math.sin(hd), hd


@dataclass(frozen=True)
class ParticipantSpec:
    id: str
    role: str  # "CAV" | "CIS"
    sensors: tuple[SensorSpec, ...]
    trajectory: LoopTrajectory | None = None
    pose: tuple[float, float, float] | None = None  # x, y, heading_deg (CIS)
    loc_sigma: float = 0.02
    noise_scale: float = 1.0  # actual / advertised sensing noise
    radius: float = 0.25

    def __post_init__(self):
        if self.role not in ("CAV", "CIS"):
            raise ConfigError(f"participant {self.id}: role must be CAV or CIS")
        if self.role == "CIS" and self.pose is None:
            raise ConfigError(f"participant {self.id}: CIS needs a fixed pose")
        if self.role == "CAV" and self.trajectory is None:
            raise ConfigError(f"participant {self.id}: CAV needs a trajectory")


@dataclass(frozen=True)
class NpcSpec:
    id: str
    trajectory: LoopTrajectory
    radius: float = 0.25


@dataclass(frozen=True)
class FaultSpec:
    error_id: str
    target: str
    magnitude: float
    inject_at: float | None = None

    def __post_init__(self):
        if self.error_id not in ERROR_IDS:
            raise ConfigError(f"unknown errorId {self.error_id!r}")
        n, e = self.magnitude, int(self.error_id[1:])
        ok = {
            1: 0 <= n <= 90, 2: 0 <= n <= 90, 3: 0 <= n <= 90,
            4: 0 <= n <= 1, 5: 0 <= n <= 1, 6: 0 <= n <= 1,
            7: n >= 0, 8: 0 <= n < 100, 9: 0 <= n < 100,
            10: n == 1, 11: n == 1, 12: n == 1, 13: n == 1,
            14: n >= 0,
        }[e]
        if not ok:
            raise ConfigError(f"magnitude {n} outside legal domain for {self.error_id}")

    def active(self, t: float) -> bool:
        return self.inject_at is not None and t >= self.inject_at

    def effects(self) -> "FaultEffects":
        """Translate the fault into the pipeline hooks it perturbs."""
        e, n = self.error_id, float(self.magnitude)
        fx = FaultEffects()
        if e == "E1":
            fx.skew_deg = {"camera": n}
        elif e == "E2":
            fx.skew_deg = {"lidar": n}
        elif e == "E3":
            fx.skew_deg = {"camera": n, "lidar": n}
        elif e == "E4":
            fx.drop_prob = n
        elif e == "E5":
            fx.remove_crossing_prob = n
        elif e == "E6":
            fx.inject_prob = n
        elif e == "E7":
            fx.loc_scale = 1 + n / 100
        elif e == "E8":
            fx.lidar_cov_scale = 1 - n / 100
        elif e == "E9":
            fx.global_cov_scale = 1 - n / 100
        elif e == "E10":
            fx.corrupt_challenge = True
        elif e == "E11":
            fx.expire_token = True
        elif e == "E12":
            fx.drop_one_packet = True
        elif e == "E13":
            fx.replay = True
        elif e == "E14":
            fx.pose_offset = n
        return fx


@dataclass
class FaultEffects:
    skew_deg: dict[str, float] = field(default_factory=dict)
    drop_prob: float = 0.0
    remove_crossing_prob: float = 0.0
    inject_prob: float = 0.0
    loc_scale: float = 1.0
    lidar_cov_scale: float = 1.0
    global_cov_scale: float = 1.0
    corrupt_challenge: bool = False
    expire_token: bool = False
    drop_one_packet: bool = False
    replay: bool = False
    pose_offset: float = 0.0


NO_EFFECTS = FaultEffects()


def inject_fault(fault: FaultSpec | None, participant: str, t: float) -> FaultEffects:
    """Effects applying to ``participant`` at time ``t`` (none if inactive)."""
    if fault is None or fault.target != participant or not fault.active(t):
        return NO_EFFECTS
    return fault.effects()


@dataclass(frozen=True)
class ObjectState:
    id: str
    x: float
    y: float
    vx: float
    vy: float
    heading: float
    radius: float

    @property
    def pos(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class WorldConfig:
    participants: tuple[ParticipantSpec, ...]
    npcs: tuple[NpcSpec, ...] = ()
    crossing_half_size: float = 2.0  # E5/E6 rectangle around the intersection
    visibility_threshold: float = 0.5
    consensus_radius: float = 30.0
    v_max: float = 2.0

    def participant(self, pid: str) -> ParticipantSpec:
        for p in self.participants:
            if p.id == pid:
                return p
        raise ConfigError(f"unknown participant {pid!r}")


class World:
    def __init__(self, config: WorldConfig):
        self.config = config
        ids = [p.id for p in config.participants] + [n.id for n in config.npcs]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate object ids")
        for p in config.participants:
            if p.trajectory and p.trajectory.speed > config.v_max:
                raise ConfigError(f"{p.id}: speed above v_max")
        self.index = {p.id: i for i, p in enumerate(config.participants)}

    def state_at(self, t: float) -> dict[str, ObjectState]:
        """Ground-truth states of every moving object (CAVs and NPCs)."""
        out = {}
        for p in self.config.participants:
            if p.role == "CAV":
                out[p.id] = ObjectState(p.id, *p.trajectory.at(t), p.radius)
        for n in self.config.npcs:
            out[n.id] = ObjectState(n.id, *n.trajectory.at(t), n.radius)
        return out

    def step(self, t: float, dt: float) -> dict[str, ObjectState]:
        if dt <= 0:
            raise ValueError("dt must be positive")
        return self.state_at(t + dt)

    def pose(self, spec: ParticipantSpec, truth: dict[str, ObjectState]) -> tuple[float, float, float]:
        if spec.role == "CIS":
            x, y, h = spec.pose
            return x, y, math.radians(h)
        s = truth[spec.id]
        return s.x, s.y, s.heading

    def in_crossing(self, pos) -> bool:
        h = self.config.crossing_half_size
        return abs(pos[0]) <= h and abs(pos[1]) <= h


def visible_fraction(sensor_pos, target_pos, target_radius: float, occluders: Iterable[tuple[tuple[float, float], float]]) -> float:
    """Unoccluded share of the target disc's angular extent seen from sensor_pos."""
    dx, dy = target_pos[0] - sensor_pos[0], target_pos[1] - sensor_pos[1]
    d = math.hypot(dx, dy)
    if d <= target_radius:
        return 1.0
    phi = math.atan2(dy, dx)
    half = math.asin(min(1.0, target_radius / d))
    lo, hi = -half, half
    blocked = []
    for (ox, oy), r in occluders:
        ex, ey = ox - sensor_pos[0], oy - sensor_pos[1]
        od = math.hypot(ex, ey)
        if od <= r:
            return 0.0
        if od - r >= d:
            continue
        c = wrap_angle(math.atan2(ey, ex) - phi)
        w = math.asin(min(1.0, r / od))
        a, b = max(lo, c - w), min(hi, c + w)
        if a < b:
            blocked.append((a, b))
    if not blocked:
        return 1.0
    blocked.sort()
    covered, cur_a, cur_b = 0.0, *blocked[0]
    for a, b in blocked[1:]:
        if a > cur_b:
            covered += cur_b - cur_a
            cur_a, cur_b = a, b
        else:
            cur_b = max(cur_b, b)
    covered += cur_b - cur_a
    return max(0.0, 1.0 - covered / (hi - lo))


@dataclass
class SensedReport:
    participant: str
    observations: list[Observation]
    self_report: Observation | None
    true_pose: tuple[float, float, float]
    reported_pose: tuple[float, float, float]
    loc_cov: np.ndarray


def sense_world(
    world: World,
    spec: ParticipantSpec,
    truth: dict[str, ObjectState],
    t: float,
    seed: int,
    round_num: int,
    effects: FaultEffects = NO_EFFECTS,
) -> SensedReport:
    """Simulate one participant's perception for one round.

    Each sensor measures every in-FOV, in-range, sufficiently visible object
    with Gaussian noise of std ``sigma(d) * noise_scale``; the readings are
    merged per object by inverse-covariance weighting and expressed in the
    world frame through the participant's (noisy) localisation.
    """
    idx = world.index[spec.id]
    noise = rng_stream(seed, idx, round_num, NOISE)
    frng = rng_stream(seed, idx, round_num, FAULT)
    x, y, h = world.pose(spec, truth)
    me = np.array([x, y])

    loc_sigma = spec.loc_sigma
    loc_err = noise.normal(0.0, loc_sigma, 2) * effects.loc_scale
    est = me + loc_err
    loc_cov = np.eye(2) * loc_sigma**2

    others = [s for oid, s in truth.items() if oid != spec.id]
    fused: list[tuple[str, np.ndarray, np.ndarray, float]] = []
    for obj in others:
        occl = [(o.pos, o.radius) for o in others if o.id != obj.id]
        readings = []
        for sensor in spec.sensors:
            # draw unconditionally so visibility changes never shift the stream
            draw = noise.normal(0.0, 1.0, 2)
            if not sensor.covers(me, h, obj.pos):
                continue
            if visible_fraction(me, obj.pos, obj.radius, occl) < world.config.visibility_threshold:
                continue
            rel = np.array([obj.x - x, obj.y - y])
            d = float(np.hypot(*rel))
            sig = sensor.sigma(d)
            meas = rel + draw * sig * spec.noise_scale
            skew = effects.skew_deg.get(sensor.kind, 0.0)
            if skew:
                meas = rot(math.radians(skew)) @ meas
            cov = sensor.advertised_cov(d, math.atan2(rel[1], rel[0]))
            if sensor.kind == "lidar":
                cov = cov * effects.lidar_cov_scale
            readings.append((meas, cov))
        if not readings:
            continue
        rel_m, cov_m = _merge(readings)
        fused.append((obj.id, est + rel_m, cov_m + loc_cov, obj.radius))

    obs: list[Observation] = []
    for oid, pos, cov, radius in fused:
        u_drop, u_cross = frng.random(2)
        if effects.drop_prob and u_drop < effects.drop_prob:
            continue
        if effects.remove_crossing_prob and world.in_crossing(truth[oid].pos) and u_cross < effects.remove_crossing_prob:
            continue
        obs.append(Observation(spec.id, (float(pos[0]), float(pos[1])), cov_to_tuple(cov), "fused", t, radius))

    if effects.inject_prob and frng.random() < effects.inject_prob:
        hs = world.config.crossing_half_size
        p = frng.uniform(-hs, hs, 2)
        d = float(np.hypot(*(p - me)))
        sensor = spec.sensors[0]
        cov = sensor.advertised_cov(d) + loc_cov
        obs.append(Observation(spec.id, (float(p[0]), float(p[1])), cov_to_tuple(cov), "fused", t, 0.25))

    reported = est.copy()
    if effects.pose_offset:
        ang = rng_stream(seed, idx, FAULT, 14).uniform(0, 2 * math.pi)
        reported = reported + effects.pose_offset * np.array([math.cos(ang), math.sin(ang)])
    self_obs = None
    if spec.role == "CAV":
        self_obs = Observation(
            spec.id, (float(reported[0]), float(reported[1])), cov_to_tuple(loc_cov), "self", t, spec.radius, "self"
        )
    return SensedReport(spec.id, obs, self_obs, (x, y, h), (float(reported[0]), float(reported[1]), h), loc_cov)


def _merge(readings):
    if len(readings) == 1:
        return readings[0]
    info = np.zeros((2, 2))
    vec = np.zeros(2)
    for z, c in readings:
        ci = np.linalg.inv(c)
        info += ci
        vec += ci @ z
    cov = np.linalg.inv(info)
    return cov @ vec, 0.5 * (cov + cov.T)


# --------------------------------------------------------------------------
# default scenario: four CAVs, two CISs, two non-connected vehicles


def default_world_config(**overrides) -> WorldConfig:
    cam = SensorSpec("camera", 160.0, 10.0, 0.0, 0.002, 0.005)
    lidar = SensorSpec("lidar", 360.0, 8.0, 0.0, 0.002, 0.005)
    cis_cam = SensorSpec("camera", 160.0, 12.0, 0.0, 0.002, 0.005)

    def loop(ox, oy, hd, phase):
        return LoopTrajectory((ox, oy), hd, 8.0, 3.0, 1.0, phase)

    participants = (
        ParticipantSpec("cav1", "CAV", (cam, lidar), loop(0.0, -0.3, 0.0, 0.0), loc_sigma=0.004),
        ParticipantSpec("cav2", "CAV", (cam, lidar), loop(0.0, 0.3, 180.0, 7.0), loc_sigma=0.004),
        ParticipantSpec("cav3", "CAV", (cam, lidar), loop(0.3, 0.0, 90.0, 14.0), loc_sigma=0.004),
        ParticipantSpec("cav4", "CAV", (cam, lidar), loop(-0.3, 0.0, 270.0, 21.0), loc_sigma=0.004),
        ParticipantSpec("cis1", "CIS", (cis_cam,), pose=(-4.0, -4.0, 45.0), loc_sigma=0.002),
        ParticipantSpec("cis2", "CIS", (cis_cam,), pose=(4.0, 4.0, 225.0), loc_sigma=0.002),
    )
    npcs = (
        NpcSpec("npc1", loop(0.0, -0.3, 0.0, 28.0)),
        NpcSpec("npc2", loop(0.3, 0.0, 90.0, 38.0)),
        NpcSpec("npc3", loop(0.0, 0.3, 180.0, 30.0)),
        NpcSpec("npc4", loop(-0.3, 0.0, 270.0, 45.0)),
    )
    cfg = WorldConfig(participants, npcs)
    return replace(cfg, **overrides) if overrides else cfg
