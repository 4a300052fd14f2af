"""Numerical core: 2D covariance helpers, constant-velocity prediction,
JPDA association and a trust-weighted unscented update.

State vectors are ``(x, y, vx, vy)``; measurements are planar positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

SYM_TOL = 1e-9
PSD_TOL = 1e-9
DEFAULT_GATE = 9.21  # chi-square, 2 dof, 99 %


class ContractError(ValueError):
    """An input violated a documented precondition."""


@dataclass(frozen=True)
class Observation:
    """One sensed object report in the world frame.

    ``kind`` is ``"object"`` for detections and ``"self"`` for a
    participant's own reported position.
    """

    sender: str
    position: tuple[float, float]
    cov: tuple[tuple[float, float], tuple[float, float]]
    sensor: str = "fused"
    stamp: float = 0.0
    radius: float = 0.25
    kind: str = "object"

    @property
    def z(self) -> np.ndarray:
        return np.asarray(self.position, dtype=float)

    @property
    def R(self) -> np.ndarray:
        return np.asarray(self.cov, dtype=float)

    def with_cov(self, cov: np.ndarray) -> "Observation":
        return replace(self, cov=cov_to_tuple(cov))


def cov_to_tuple(cov: np.ndarray) -> tuple[tuple[float, float], tuple[float, float]]:
    c = np.asarray(cov, dtype=float)
    off = 0.5 * (c[0, 1] + c[1, 0])
    return ((float(c[0, 0]), float(off)), (float(off), float(c[1, 1])))


@dataclass(frozen=True)
class TrackState:
    id: int
    mean: np.ndarray
    cov: np.ndarray
    last_update: float = 0.0
    radius: float = 0.25

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2]

    @property
    def position_cov(self) -> np.ndarray:
        return self.cov[:2, :2]


@dataclass(frozen=True)
class FilterConfig:
    """Tuning for prediction, gating and the unscented update."""

    process_noise: float = 0.5  # white-noise acceleration spectral density, m^2/s^3
    v_max: float = 2.0
    gate: float = DEFAULT_GATE
    p_detect: float = 0.9
    clutter_density: float = 1e-3  # false reports per m^2
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0
    init_velocity_var: float = 1.0
    extent_sigmas: float = 2.0  # object radius counted as this many sigma of extra gate spread


@dataclass
class AssociationResult:
    """Marginal association probabilities.

    ``weights[(track_id, obs_index)]`` holds only gated pairs; absent pairs
    are zero.  ``miss[track_id]`` is the probability the track went unseen.
    """

    weights: dict[tuple[int, int], float] = field(default_factory=dict)
    miss: dict[int, float] = field(default_factory=dict)

    def weight(self, track_id: int, obs_index: int) -> float:
        return self.weights.get((track_id, obs_index), 0.0)

    def for_track(self, track_id: int) -> dict[int, float]:
        return {j: w for (t, j), w in self.weights.items() if t == track_id}

    def best_track(self, obs_index: int) -> int | None:
        best, best_w = None, 0.0
        for (t, j), w in self.weights.items():
            if j == obs_index and w > best_w:
                best, best_w = t, w
        return best


def _check_symmetric(cov: np.ndarray) -> np.ndarray:
    c = np.asarray(cov, dtype=float)
    if c.shape != (2, 2):
        raise ContractError(f"expected 2x2 covariance, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ContractError("covariance has non-finite entries")
    if abs(c[0, 1] - c[1, 0]) > SYM_TOL * max(1.0, abs(c[0, 1]), abs(c[1, 0])):
        raise ContractError("covariance is not symmetric")
    return c


def eig_sorted(cov) -> tuple[float, float]:
    """Eigenvalues of a symmetric PSD 2x2 matrix, largest first.

    Uses the closed form for 2x2 symmetric matrices.  Tiny negative
    eigenvalues (>= -1e-9) from round-off are clamped to zero; anything more
    negative is rejected as not PSD.
    """
    c = _check_symmetric(cov)
    a, d = c[0, 0], c[1, 1]
    b = 0.5 * (c[0, 1] + c[1, 0])
    half_tr = 0.5 * (a + d)
    disc = math.hypot(0.5 * (a - d), b)
    l0 = half_tr + disc
    l1 = half_tr - disc
    if l1 < -PSD_TOL * max(1.0, abs(l0)):
        raise ContractError(f"covariance is not PSD (eigenvalue {l1:g})")
    return max(l0, 0.0), max(l1, 0.0)


def cov_sqrt(cov) -> np.ndarray:
    """Symmetric square root of a 2x2 PSD matrix (same eigenvectors,
    square-rooted eigenvalues)."""
    c = _check_symmetric(cov)
    w, v = np.linalg.eigh(0.5 * (c + c.T))
    w = np.sqrt(np.clip(w, 0.0, None))
    return (v * w) @ v.T


def hypotenuse(cov) -> float:
    """Scalar accuracy of a 2x2 covariance: sqrt(lambda0 + lambda1)."""
    l0, l1 = eig_sorted(cov)
    return math.sqrt(l0 + l1)


def transition(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def process_noise(dt: float, q: float) -> np.ndarray:
    """Discretised continuous white-noise acceleration for one 2D body."""
    Q = np.zeros((4, 4))
    p, c, v = q * dt**3 / 3.0, q * dt**2 / 2.0, q * dt
    Q[0, 0] = Q[1, 1] = p
    Q[0, 2] = Q[2, 0] = Q[1, 3] = Q[3, 1] = c
    Q[2, 2] = Q[3, 3] = v
    return Q


def ekf_predict(track: TrackState, dt: float, config: FilterConfig = FilterConfig()) -> TrackState:
    """Constant-velocity prediction by ``dt`` seconds.

    The motion model is linear, so the EKF Jacobian is the transition
    matrix itself.
    """
    if dt < 0:
        raise ContractError(f"dt must be non-negative, got {dt}")
    if dt == 0:
        return track
    F = transition(dt)
    mean = F @ track.mean
    cov = F @ track.cov @ F.T + process_noise(dt, config.process_noise)
    cov = 0.5 * (cov + cov.T)
    return replace(track, mean=mean, cov=cov, last_update=track.last_update + dt)


def init_track(track_id: int, obs: Observation, t: float, config: FilterConfig = FilterConfig()) -> TrackState:
    mean = np.array([obs.position[0], obs.position[1], 0.0, 0.0])
    cov = np.zeros((4, 4))
    cov[:2, :2] = obs.R
    cov[2, 2] = cov[3, 3] = config.init_velocity_var
    return TrackState(id=track_id, mean=mean, cov=cov, last_update=t, radius=obs.radius)


def _gaussian_2d(nu: np.ndarray, S: np.ndarray) -> tuple[float, float]:
    """Return (squared Mahalanobis distance, density) for innovation nu."""
    a, b, d = S[0, 0], 0.5 * (S[0, 1] + S[1, 0]), S[1, 1]
    det = a * d - b * b
    if det <= 0:
        return math.inf, 0.0
    m2 = (d * nu[0] ** 2 - 2 * b * nu[0] * nu[1] + a * nu[1] ** 2) / det
    return m2, math.exp(-0.5 * m2) / (2 * math.pi * math.sqrt(det))


def association_cov(track: TrackState, obs: Observation, extent_sigmas: float = 2.0) -> np.ndarray:
    # extent term stands in for bounding-box size
    ext = (track.radius / extent_sigmas) ** 2
    return track.position_cov + obs.R + ext * np.eye(2)


def jpda_associate(
    tracks: Sequence[TrackState],
    observations: Sequence[Observation],
    gate: float = DEFAULT_GATE,
    config: FilterConfig = FilterConfig(),
) -> AssociationResult:
    """Joint probabilistic data association for one sensor scan.

    Feasible joint events assign each observation to at most one track and
    each track at most one observation, restricted to gated pairs.  Events
    are enumerated exactly per connected cluster.
    """
    result = AssociationResult()
    if not tracks:
        return result
    pd, lam = config.p_detect, config.clutter_density
    lik: dict[tuple[int, int], float] = {}
    for ti, trk in enumerate(tracks):
        for j, obs in enumerate(observations):
            m2, dens = _gaussian_2d(obs.z - trk.position, association_cov(trk, obs, config.extent_sigmas))
            if m2 <= gate and dens > 0:
                lik[(ti, j)] = pd * dens / lam

    # union-find style clustering over gated pairs
    parent = list(range(len(tracks)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    obs_tracks: dict[int, list[int]] = {}
    for ti, j in lik:
        obs_tracks.setdefault(j, []).append(ti)
    for ts in obs_tracks.values():
        for t in ts[1:]:
            parent[find(t)] = find(ts[0])

    clusters: dict[int, list[int]] = {}
    for ti in range(len(tracks)):
        clusters.setdefault(find(ti), []).append(ti)

    for members in clusters.values():
        mset = set(members)
        cobs = sorted(j for j, ts in obs_tracks.items() if set(ts) & mset)
        marg: dict[tuple[int, int], float] = {}
        miss = {ti: 0.0 for ti in members}
        total = 0.0
        for event, p in _enumerate_events(cobs, obs_tracks, lik, len(members), pd):
            total += p
            used = set()
            for j, ti in event:
                marg[(ti, j)] = marg.get((ti, j), 0.0) + p
                used.add(ti)
            for ti in members:
                if ti not in used:
                    miss[ti] += p
        for (ti, j), p in marg.items():
            result.weights[(tracks[ti].id, j)] = p / total
        for ti in members:
            result.miss[tracks[ti].id] = miss[ti] / total
    return result


def _enumerate_events(cobs, obs_tracks, lik, n_tracks, pd):
    """Yield (assignment list, unnormalised probability) for every feasible event."""
    miss_factor = 1.0 - pd

    def rec(k: int, used: frozenset, acc: list, p: float):
        if k == len(cobs):
            yield list(acc), p * miss_factor ** (n_tracks - len(used))
            return
        j = cobs[k]
        yield from rec(k + 1, used, acc, p)
        for ti in obs_tracks.get(j, ()):
            if ti not in used:
                acc.append((j, ti))
                yield from rec(k + 1, used | {ti}, acc, p * lik[(ti, j)])
                acc.pop()

    yield from rec(0, frozenset(), [], 1.0)


def _sigma_points(mean: np.ndarray, cov: np.ndarray, config: FilterConfig):
    n = mean.size
    lam = config.alpha**2 * (n + config.kappa) - n
    try:
        L = np.linalg.cholesky((n + lam) * cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(0.5 * (cov + cov.T))
        L = v * np.sqrt(np.clip(w, 0.0, None) * (n + lam))
    pts = np.empty((2 * n + 1, n))
    pts[0] = mean
    pts[1 : n + 1] = mean + L.T
    pts[n + 1 :] = mean - L.T
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + (1 - config.alpha**2 + config.beta)
    return pts, wm, wc


def _nearest_psd(P: np.ndarray) -> np.ndarray:
    P = 0.5 * (P + P.T)
    w, v = np.linalg.eigh(P)
    if w[0] >= 0:
        return P
    return (v * np.clip(w, 0.0, None)) @ v.T


def trust_inflation(trust: float) -> float:
    """Covariance multiplier for an observation from a contributor with the
    given trust score (higher score = less trusted)."""
    return max(1.0, float(trust))


def ukf_update(
    track: TrackState,
    weighted_obs: Iterable[tuple[Observation, float, float]],
    config: FilterConfig = FilterConfig(),
) -> TrackState:
    """Unscented update with probabilistically weighted observations.

    Each ``(obs, weight, trust)`` contributes a conditional posterior using
    the observation covariance inflated by :func:`trust_inflation`; the
    mixture (including the missed-detection hypothesis carrying the
    remaining weight) is collapsed to a single Gaussian.
    """
    items = [(o, float(w), float(s)) for o, w, s in weighted_obs if w > 0]
    if not items:
        return track
    total = sum(w for _, w, _ in items)
    if total > 1.0 + 1e-9:
        items = [(o, w / total, s) for o, w, s in items]
        total = 1.0
    w_miss = max(0.0, 1.0 - total)

    pts, wm, wc = _sigma_points(track.mean, track.cov, config)
    zs = pts[:, :2]
    z_hat = wm @ zs
    dz = zs - z_hat
    dx = pts - track.mean
    Pzz = (wc[:, None] * dz).T @ dz
    Pxz = (wc[:, None] * dx).T @ dz

    means, covs, ws = [], [], []
    for obs, w, trust in items:
        S = Pzz + obs.R * trust_inflation(trust)
        K = Pxz @ np.linalg.inv(S)
        means.append(track.mean + K @ (obs.z - z_hat))
        covs.append(track.cov - K @ S @ K.T)
        ws.append(w)
    if w_miss > 0:
        means.append(track.mean)
        covs.append(track.cov)
        ws.append(w_miss)
    ws_arr = np.asarray(ws)
    mean = ws_arr @ np.asarray(means)
    cov = np.zeros((4, 4))
    for w, m, c in zip(ws, means, covs):
        d = m - mean
        cov += w * (c + np.outer(d, d))
    cov = _nearest_psd(cov)

    speed = math.hypot(mean[2], mean[3])
    if config.v_max and speed > config.v_max:
        mean = mean.copy()
        mean[2:] *= config.v_max / speed
    return replace(track, mean=mean, cov=cov)


def nees(err: np.ndarray, cov: np.ndarray) -> float:
    return float(err @ np.linalg.solve(cov, err))

