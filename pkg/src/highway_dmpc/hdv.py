"""Human-driven vehicle behaviour: W99 car following and rule-based lane selection.

The car-following law is the publicly documented ten-parameter psycho-spacing
model (thresholds sdxc/sdxo/sdxv on spacing, sdv/sdvc/sdvo on speed
difference). It has memory through the previous acceleration, used in the
following regime. A stopping-distance clamp keeps the follower collision-free
when the leader brakes hard, which the raw psycho-spacing rules do not
guarantee on their own.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import truncnorm

KMH80 = 80.0 / 3.6


@dataclass(frozen=True)
class DriverParams:
    cc0: float = 3.04
    cc1: float = 1.45
    cc2: float = 4.0
    cc3: float = -8.0
    cc4: float = -0.35
    cc5: float = 0.35
    cc6: float = 11.44
    cc7: float = 0.25
    cc8: float = 3.5
    cc9: float = 1.5
    v_do: float = 24.2

    def __post_init__(self):
        if self.cc0 <= 0 or self.cc1 <= 0 or self.v_do <= 0:
            raise ValueError("cc0, cc1 and v_do must be positive")


@dataclass
class DriverDistribution:
    cc1_mean: float = 1.45
    cc1_var: float = 0.01
    v_do_mean: float = 24.2
    v_do_std: float = 1.5
    v_do_min: float = 21.0
    v_do_max: float = 28.0
    base: DriverParams = DriverParams()


def sample_driver(rng: np.random.Generator, dist: DriverDistribution | None = None) -> DriverParams:
    d = dist or DriverDistribution()
    sd = math.sqrt(d.cc1_var)
    cc1 = truncnorm.rvs(-3.0, 3.0, loc=d.cc1_mean, scale=sd, random_state=rng)
    lo = (d.v_do_min - d.v_do_mean) / d.v_do_std
    hi = (d.v_do_max - d.v_do_mean) / d.v_do_std
    v_do = truncnorm.rvs(lo, hi, loc=d.v_do_mean, scale=d.v_do_std, random_state=rng)
    return replace(d.base, cc1=float(cc1), v_do=float(v_do))


@dataclass
class HdvConfig:
    max_decel: float = 6.0          # braking level assumed for stopping distances
    emergency_decel: float = 8.0    # hard floor on commanded acceleration
    reaction_time: float = 0.5
    hysteresis: float = 1.0         # speed advantage needed to change lane (m/s)
    lookahead: float = 100.0        # leaders farther than this do not limit anticipated speed
    cooldown: float = 4.0           # s between completed lane changes
    lateral_gain: float = 0.5       # 1/s^2
    lateral_damping: float = 1.4    # 1/s


def w99_accel(v: float, a_prev: float, gap: float | None, v_lead: float, a_lead: float,
              p: DriverParams, v_des: float | None = None) -> float:
    """W99 acceleration; ``gap`` is bumper-to-bumper distance (None: no leader)."""
    v_des = p.v_do if v_des is None else v_des
    a_max = p.cc8 + (p.cc9 - p.cc8) * min(v, KMH80) / KMH80
    if gap is None:
        return float(min(a_max, v_des - v))
    dx = gap
    dv = v_lead - v
    sdxc = p.cc0 + p.cc1 * (v if dv > 0 or a_lead < -1.0 else v_lead) if v_lead > 0 else p.cc0
    sdxo = sdxc + p.cc2
    sdxv = sdxo + p.cc3 * (dv - p.cc4)
    sdv = p.cc6 * dx * dx / 10000.0
    sdvc = p.cc4 - sdv if v_lead > 0 else 0.0
    sdvo = p.cc5 + sdv if v > p.cc5 else sdv

    if dv < sdvo and dx <= sdxc:
        # too close: brake
        a = 0.0
        if v > 0:
            if dv < 0:
                if dx > p.cc0:
                    a = min(a_lead + dv * dv / (p.cc0 - dx), a)
                else:
                    a = min(a_lead + 0.5 * (dv - sdvo), a)
            if a > -p.cc7:
                a = -p.cc7
            else:
                a = max(a, -10.0 + 0.5 * math.sqrt(v))
    elif dv < sdvc and dx < sdxv:
        # closing in: decelerate towards the desired spacing
        a = max(0.5 * dv * dv / (-dx + sdxc - 0.1), -10.0)
    elif dv < sdvo and dx < sdxo:
        # following: keep the sign of the previous acceleration at the oscillation level
        if a_prev <= 0:
            a = min(a_prev, -p.cc7)
        else:
            a = min(max(a_prev, p.cc7), v_des - v)
    else:
        # free driving or relaxing towards the leader
        if dx > sdxc:
            a = min(dv * dv / (sdxo - dx), a_max) if dx < sdxo else a_max
        else:
            a = 0.0
        a = min(a, v_des - v)
    return float(a)


def safe_accel_bound(v: float, gap: float, v_lead: float, dt: float, cfg: HdvConfig,
                     standstill: float = 0.5) -> float:
    """Largest acceleration after which the follower can still stop behind a braking leader."""
    b = cfg.max_decel
    tau = max(dt, cfg.reaction_time)
    room = gap - standstill + v_lead * v_lead / (2.0 * b)
    disc = b * b * tau * tau + 2.0 * b * max(room, 0.0)
    v_safe = max(-b * tau + math.sqrt(disc), 0.0)
    return (v_safe - v) / dt


def car_following_accel(v, a_prev, gap, v_lead, a_lead, p: DriverParams, dt: float,
                        cfg: HdvConfig | None = None, v_des=None) -> float:
    cfg = cfg or HdvConfig()
    a = w99_accel(v, a_prev, gap, v_lead, a_lead, p, v_des)
    if gap is not None:
        a = min(a, safe_accel_bound(v, gap, v_lead, dt, cfg))
    return float(max(a, -cfg.emergency_decel))


def integrate_longitudinal(s: float, v: float, a: float, dt: float):
    """Constant acceleration over the step with the speed floored at zero."""
    if v + a * dt < 0.0:
        t_stop = v / -a if a < 0 else 0.0
        return s + 0.5 * v * t_stop, 0.0
    return s + v * dt + 0.5 * a * dt * dt, v + a * dt


def lateral_accel(y: float, v_y: float, y_ref: float, cfg: HdvConfig) -> float:
    return cfg.lateral_gain * (y_ref - y) - cfg.lateral_damping * v_y


def integrate_lateral(y, v_y, y_ref, dt, cfg: HdvConfig):
    """Exact-enough RK4 step of the lane-tracking law."""
    def f(state):
        yy, vv = state
        return np.array([vv, lateral_accel(yy, vv, y_ref, cfg)])
    x = np.array([y, v_y], dtype=float)
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return float(x[0]), float(x[1])


@dataclass(frozen=True)
class LaneNeighbors:
    """Nearest vehicle ahead and behind in one lane: (gap, speed) or None."""

    lead: tuple | None = None
    follow: tuple | None = None


def safe_gap(v_behind: float, v_ahead: float, cfg: HdvConfig, standstill: float) -> float:
    """Stopping-distance gap so the rear vehicle can stop behind the front one."""
    b = cfg.max_decel
    return standstill + max(0.0, (v_behind**2 - v_ahead**2) / (2.0 * b)) + cfg.reaction_time * v_behind


def anticipated_speed(nb: LaneNeighbors, v_des: float, cfg: HdvConfig) -> float:
    if nb.lead is None or nb.lead[0] > cfg.lookahead:
        return v_des
    return min(v_des, nb.lead[1])


def gaps_acceptable(v: float, nb: LaneNeighbors, cfg: HdvConfig, standstill: float) -> bool:
    if nb.lead is not None and nb.lead[0] < safe_gap(v, nb.lead[1], cfg, standstill):
        return False
    if nb.follow is not None and nb.follow[0] < safe_gap(nb.follow[1], v, cfg, standstill):
        return False
    return True


def rbls_decision(lane: int, n_lanes: int, v: float, neighbors: dict, p: DriverParams,
                  cfg: HdvConfig | None = None, v_des: float | None = None,
                  s: float | None = None, no_change_zone: float = 0.0) -> int:
    """Return -1 (to lower lane index), 0 (stay) or +1 (to higher lane index).

    ``neighbors`` maps lane index to LaneNeighbors for the current lane and
    any adjacent lanes. A change needs an anticipated speed gain above the
    hysteresis and acceptable gaps in the target lane. When both sides
    qualify the larger gain wins, ties toward the higher index.
    """
    cfg = cfg or HdvConfig()
    if s is not None and s < no_change_zone:
        return 0
    v_des = p.v_do if v_des is None else v_des
    here = anticipated_speed(neighbors.get(lane, LaneNeighbors()), v_des, cfg)
    best, best_gain = 0, cfg.hysteresis
    for direction in (+1, -1):
        target = lane + direction
        if not 1 <= target <= n_lanes:
            continue
        nb = neighbors.get(target, LaneNeighbors())
        gain = anticipated_speed(nb, v_des, cfg) - here
        if gain > best_gain and gaps_acceptable(v, nb, cfg, p.cc0):
            best, best_gain = direction, gain
    return best


@dataclass
class LaneChangeState:
    """Signal-then-move bookkeeping for rule-based lane changes."""

    target: int
    signal: int = 0
    last_change: float = -1e9

    def step(self, t: float, lane: int, decision: int, cfg: HdvConfig, moving: bool) -> int:
        """Advance one decision cycle; returns the lane whose centre should be tracked."""
        if moving:
            return self.target
        if t - self.last_change < cfg.cooldown:
            self.signal = 0
            self.target = lane
            return lane
        if self.signal and decision == self.signal:
            self.target = lane + self.signal
            self.signal = 0
            self.last_change = t
            return self.target
        self.signal = decision
        self.target = lane
        return lane
