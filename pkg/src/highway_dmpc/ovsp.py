"""Object-vehicle state prediction.

Peer CAV plans are re-timed onto the ego planning clock; unconnected vehicles
are tracked with linear-feedback models (car following longitudinally, lane
keeping laterally) whose unknown inputs are augmented into the filter state.
Horizon rollouts use the most-likely-measurement update: the mean follows the
model, only the covariance is corrected.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dmpc.solver import ObstacleTrajectory

# neighbour predictions handed to the planner carry the same fields as obstacles
OvPrediction = ObstacleTrajectory


class StalePlanError(ValueError):
    """The communicated plan is older than one horizon step."""


class ConditioningError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LaneStat:
    mean_speed: float
    lo: float
    hi: float
    count: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError("FOV bounds must satisfy lo <= hi")
        if self.count < 0:
            raise ValueError("count must be >= 0")


@dataclass(frozen=True)
class InfoMatrix:
    """Message a CAV broadcasts after planning."""

    sender: int
    t_p: float
    plan: np.ndarray                 # (N_h+1, 2) of (s, y_e)
    lanes: tuple = ()                # LaneStat per lane
    length: float = 5.0
    width: float = 2.0
    decel: float = 6.0

    def __post_init__(self):
        plan = np.asarray(self.plan, dtype=float)
        if plan.ndim != 2 or plan.shape[1] != 2:
            raise ValueError("plan must have shape (N+1, 2)")
        if np.any(np.diff(plan[:, 0]) < -1e-9):
            raise ValueError("plan s must be nondecreasing")
        plan.setflags(write=False)
        object.__setattr__(self, "plan", plan)


def _shift_series(x, frac):
    dx = np.empty_like(x)
    dx[:-1] = x[1:] - x[:-1]
    dx[-1] = x[-1] - x[-2]
    return x + frac * dx


def synchronize_plan(msg: InfoMatrix, t_i: float, s_hat: float, y_hat: float,
                     dt_h: float) -> np.ndarray:
    """Re-time a peer plan to ``t_i`` and anchor stage 0 at the current estimate.

    Each coordinate is advanced by the delay fraction of its forward
    difference (backward at the last stage), then translated so the first
    stage equals ``(s_hat, y_hat)``.
    """
    delay = t_i - msg.t_p
    if delay < -1e-12 or delay > dt_h + 1e-12:
        raise StalePlanError(f"plan delay {delay:.6g}s outside [0, {dt_h}]")
    frac = min(max(delay, 0.0), dt_h) / dt_h
    out = np.empty_like(msg.plan)
    for c, anchor in ((0, s_hat), (1, y_hat)):
        shifted = _shift_series(msg.plan[:, c], frac)
        out[:, c] = shifted - shifted[0] + anchor
        out[0, c] = anchor
    return out


def plan_to_prediction(vid: int, sync: np.ndarray, dt_h: float, length=5.0, width=2.0,
                       decel=6.0) -> ObstacleTrajectory:
    """Finite-difference the synchronized (s, y_e) plan into an obstacle trajectory."""
    vel = np.empty_like(sync)
    vel[:-1] = np.diff(sync, axis=0) / dt_h
    vel[-1] = vel[-2]
    a_y = np.empty(len(sync))
    a_y[:-1] = np.diff(vel[:, 1]) / dt_h
    a_y[-1] = a_y[-2]
    return ObstacleTrajectory(sync[:, 0].copy(), sync[:, 1].copy(), vel[:, 0], vel[:, 1], a_y,
                              length=length, width=width, decel=decel, vid=vid, is_cav=True)


@dataclass
class FilterGains:
    k_s: float = 0.05
    k_vs: float = 0.3
    k_y: float = 0.1
    k_vy: float = 0.6
    d_s: float = 12.0
    q_pos: float = 0.1
    q_vel: float = 0.2
    q_dist: float = 0.05
    r_pos: float = 0.5
    r_vel: float = 0.5

    def long_matrices(self, dt):
        ks, kv = self.k_s * dt, self.k_vs * dt
        A = np.array([[1.0, dt, 0.0, 0.0],
                      [-ks, 1.0 - kv, ks, kv],
                      [0.0, 0.0, 1.0, dt],
                      [0.0, 0.0, 0.0, 1.0]])
        b = np.array([0.0, -ks * self.d_s, 0.0, 0.0])
        H = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
        Q = np.diag([self.q_pos**2, self.q_vel**2, self.q_dist**2, self.q_dist**2])
        R = np.diag([self.r_pos**2, self.r_vel**2])
        return A, b, H, Q, R

    def lat_matrices(self, dt):
        ky, kv = self.k_y * dt, self.k_vy * dt
        A = np.array([[1.0, dt, 0.0],
                      [-ky, 1.0 - kv, ky],
                      [0.0, 0.0, 1.0]])
        b = np.zeros(3)
        H = np.array([[1.0, 0.0, 0.0]])
        Q = np.diag([self.q_pos**2, self.q_vel**2, self.q_dist**2])
        R = np.array([[self.r_pos**2]])
        return A, b, H, Q, R

    def spectral_radii(self, dt):
        """Closed-loop spectral radius of the longitudinal and lateral feedback blocks."""
        A_l = self.long_matrices(dt)[0][:2, :2]
        A_y = self.lat_matrices(dt)[0][:2, :2]
        return (float(np.max(np.abs(np.linalg.eigvals(A_l)))),
                float(np.max(np.abs(np.linalg.eigvals(A_y)))))


def _psd(P):
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if w.min() < -1e-8 * max(1.0, abs(w).max()):
        w = np.maximum(w, 0.0)
        P = (V * w) @ V.T
        if np.linalg.eigvalsh(P).min() < -1e-9:
            raise ConditioningError("covariance not PSD after clamping")
    return P


def _measurement_update(z, P, H, R, meas):
    S = H @ P @ H.T + R
    # pseudo-inverse: with zero noise and zero covariance S vanishes and K = 0
    K = (np.linalg.pinv(S) @ (H @ P)).T
    z = z + K @ (meas - H @ z)
    I_KH = np.eye(len(z)) - K @ H
    P = I_KH @ P @ I_KH.T + K @ R @ K.T
    return z, _psd(P)


@dataclass
class HdvFilter:
    """Kalman filters for one unconnected neighbour (longitudinal + lateral)."""

    gains: FilterGains
    z_long: np.ndarray
    P_long: np.ndarray
    z_lat: np.ndarray
    P_lat: np.ndarray
    t: float = 0.0
    length: float = 5.0
    width: float = 2.0

    @classmethod
    def initialize(cls, s, v, y, y_ref, t=0.0, gains: FilterGains | None = None, **dims):
        g = gains or FilterGains()
        z_long = np.array([s, v, s + g.d_s, v], dtype=float)
        P_long = np.diag([g.r_pos**2, g.r_vel**2, 5.0**2, 1.0**2])
        z_lat = np.array([y, 0.0, y_ref], dtype=float)
        P_lat = np.diag([g.r_pos**2, g.r_vel**2, 1.0**2])
        return cls(g, z_long, P_long, z_lat, P_lat, t, **dims)

    def predict(self, dt):
        if dt <= 0:
            return
        for attr, mats in (("long", self.gains.long_matrices(dt)), ("lat", self.gains.lat_matrices(dt))):
            A, b, _, Q, _ = mats
            z = getattr(self, "z_" + attr)
            P = getattr(self, "P_" + attr)
            setattr(self, "z_" + attr, A @ z + b)
            setattr(self, "P_" + attr, _psd(A @ P @ A.T + Q))
        self.t += dt

    def update(self, t, s, v, y):
        """Advance to time ``t`` and fuse a measurement of (s, v_s, y_e)."""
        self.predict(t - self.t)
        self.t = t
        _, _, H, _, R = self.gains.long_matrices(1.0)
        self.z_long, self.P_long = _measurement_update(self.z_long, self.P_long, H, R,
                                                       np.array([s, v]))
        _, _, H, _, R = self.gains.lat_matrices(1.0)
        self.z_lat, self.P_lat = _measurement_update(self.z_lat, self.P_lat, H, R, np.array([y]))


def predict_hdv_longitudinal(f: HdvFilter, n_steps: int, dt: float, updates: bool = True):
    """Roll the longitudinal model forward; returns (means (n+1,4), covariances (n+1,4,4))."""
    return _rollout(f.z_long, f.P_long, f.gains.long_matrices(dt), n_steps, updates)


def predict_hdv_lateral(f: HdvFilter, n_steps: int, dt: float, updates: bool = True):
    return _rollout(f.z_lat, f.P_lat, f.gains.lat_matrices(dt), n_steps, updates)


def _rollout(z, P, mats, n_steps, updates):
    A, b, H, Q, R = mats
    zs = [z.copy()]
    Ps = [P.copy()]
    for _ in range(n_steps):
        z = A @ z + b
        P = _psd(A @ P @ A.T + Q)
        if updates:
            # most likely measurement: innovation is zero, so only P changes
            z, P = _measurement_update(z, P, H, R, H @ z)
        zs.append(z)
        Ps.append(P)
    return np.array(zs), np.array(Ps)


def filter_to_prediction(vid: int, f: HdvFilter, n_steps: int, dt: float,
                         decel: float = 6.0) -> ObstacleTrajectory:
    zl, Pl = predict_hdv_longitudinal(f, n_steps, dt)
    zy, Py = predict_hdv_lateral(f, n_steps, dt)
    g = f.gains
    a_y = -g.k_y * (zy[:, 0] - zy[:, 2]) - g.k_vy * zy[:, 1]
    obs = ObstacleTrajectory(zl[:, 0], zy[:, 0], zl[:, 1], zy[:, 1], a_y, length=f.length,
                             width=f.width, decel=decel, vid=vid, is_cav=False)
    obs.covariance = {"longitudinal": Pl, "lateral": Py}
    return obs


@dataclass(frozen=True)
class Measurement:
    vid: int
    s: float
    y: float
    v_s: float
    v_y: float = 0.0
    length: float = 5.0
    width: float = 2.0
    is_cav: bool = False


@dataclass
class Predictor:
    """Per-CAV neighbour predictor; keeps one filter per tracked unconnected vehicle."""

    n_steps: int = 12
    dt_h: float = 0.5
    gains: FilterGains = field(default_factory=FilterGains)
    decel_hdv: float = 6.0
    decel_cav: float = 6.0
    lane_centers: tuple = (0.0,)
    filters: dict = field(default_factory=dict)

    def _filter_for(self, m: Measurement, t: float) -> HdvFilter:
        f = self.filters.get(m.vid)
        y_ref = min(self.lane_centers, key=lambda c: abs(c - m.y))
        if f is None:
            f = HdvFilter.initialize(m.s, m.v_s, m.y, y_ref, t, self.gains,
                                     length=m.length, width=m.width)
            self.filters[m.vid] = f
        else:
            f.update(t, m.s, m.v_s, m.y)
        return f

    def assemble(self, t: float, peers: dict, sensed: list) -> list:
        """Neighbourhood predictions, one per vehicle id, sorted by id.

        ``peers`` maps sender id to its latest InfoMatrix; ``sensed`` holds the
        measurements from the field of view. A vehicle in both sets uses its
        plan; a stale plan falls back to the filtered model.
        """
        by_id = {m.vid: m for m in sensed}
        out = {}
        for vid in sorted(peers):
            msg = peers[vid]
            m = by_id.get(vid)
            try:
                if m is not None:
                    s_hat, y_hat = m.s, m.y
                else:
                    # not in view: anchor at the plan's own re-timed first stage
                    s_hat, y_hat = _anchor_from_plan(msg, t, self.dt_h)
                sync = synchronize_plan(msg, t, s_hat, y_hat, self.dt_h)
            except StalePlanError:
                if m is None:
                    continue
                f = self._filter_for(m, t)
                out[vid] = filter_to_prediction(vid, f, self.n_steps, self.dt_h, self.decel_cav)
                out[vid].is_cav = True
                continue
            out[vid] = plan_to_prediction(vid, sync, self.dt_h, msg.length, msg.width, msg.decel)
        for m in sensed:
            if m.vid in out:
                continue
            f = self._filter_for(m, t)
            decel = self.decel_cav if m.is_cav else self.decel_hdv
            out[m.vid] = filter_to_prediction(m.vid, f, self.n_steps, self.dt_h, decel)
        seen = set(by_id)
        for vid in list(self.filters):
            if vid not in seen:
                del self.filters[vid]
        return [out[k] for k in sorted(out)]


def _anchor_from_plan(msg, t, dt_h):
    delay = t - msg.t_p
    if delay < -1e-12 or delay > dt_h + 1e-12:
        raise StalePlanError(f"plan delay {delay:.6g}s outside [0, {dt_h}]")
    frac = min(max(delay, 0.0), dt_h) / dt_h
    return (float(_shift_series(msg.plan[:, 0], frac)[0]),
            float(_shift_series(msg.plan[:, 1], frac)[0]))
