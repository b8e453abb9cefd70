"""Distributed reference speed assignment.

Each CAV estimates a per-lane traffic speed from its own field of view and
from the per-lane statistics broadcast by peers. Peer counts are scaled by the
fraction of their field of view not already covered (vehicles assumed evenly
spread), so overlapping sensors are not double counted. Sparse lanes fall back
to a rule that only looks at the nearest downstream vehicle.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class InconsistentMessageError(ValueError):
    pass


@dataclass(frozen=True)
class LaneObservation:
    lane: int
    mean_speed: float
    count: float
    lo: float
    hi: float
    width: float = 3.5

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError("FOV bounds must satisfy lo <= hi")
        if self.count < 0:
            raise ValueError("count must be >= 0")


@dataclass
class RsaConfig:
    density_threshold: float = 10.0 / 1000.0   # veh/m
    lookahead: float = 200.0
    filter_epsilon: float = 0.1

    def __post_init__(self):
        if self.density_threshold < 0 or self.lookahead <= 0 or self.filter_epsilon < 0:
            raise ValueError("RSA parameters must be nonnegative (lookahead positive)")


def merge_intervals(intervals) -> list:
    """Sorted, pairwise-disjoint union of closed intervals (touching ones merged)."""
    ivs = sorted((float(a), float(b)) for a, b in intervals if b > a)
    out = []
    for a, b in ivs:
        if out and a <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


def unique_fov_area(coverage, peer, width: float):
    """Area of ``peer`` intervals not already covered, and the grown coverage.

    Every peer piece is compared with each covered interval in turn: a piece
    that straddles a covered interval is split around it, one that overlaps on
    one side is shrunk to the uncovered part, one inside is dropped, and a
    disjoint piece is kept. Whatever survives is unique; it is appended to the
    coverage, which is then merged with itself.
    """
    cov = merge_intervals(coverage)
    pieces = [(float(a), float(b)) for a, b in peer if b > a]
    for lo_q, hi_q in cov:
        nxt = []
        for lo_r, hi_r in pieces:
            if hi_r <= lo_q or lo_r >= hi_q:
                nxt.append((lo_r, hi_r))
            elif lo_r < lo_q and hi_r > hi_q:
                nxt += [(lo_r, lo_q), (hi_q, hi_r)]
            elif lo_r >= lo_q and hi_r <= hi_q:
                continue
            elif lo_r < lo_q:
                nxt.append((lo_r, lo_q))
            else:
                nxt.append((hi_q, hi_r))
        pieces = nxt
    unique = merge_intervals(pieces)
    area = width * sum(b - a for a, b in unique)
    return area, merge_intervals(cov + unique)


def unique_count(area_unique: float, area_total: float, count: float) -> float:
    if area_total <= 0:
        if count > 0:
            raise InconsistentMessageError("peer reports vehicles in a zero-area field of view")
        return 0.0
    return area_unique / area_total * count


def lane_reference_speed(local: LaneObservation, peers) -> float:
    """Count-weighted mean of local and peer lane speeds; ``peers`` is [(N_u, mu)]."""
    n = local.count + sum(nu for nu, _ in peers)
    if n <= 0:
        raise ValueError("no vehicles observed in lane; use the rule-based assigner")
    acc = (local.count * local.mean_speed if local.count > 0 else 0.0)
    acc += sum(nu * mu for nu, mu in peers if nu > 0)
    return acc / n


def desired_speed(lane_speeds, v_do: float) -> float:
    """Lane speed closest to the base desired speed; ties go to the faster lane."""
    vals = np.asarray(lane_speeds, dtype=float)
    if vals.size == 0:
        raise ValueError("empty lane set")
    dist = np.abs(vals - v_do)
    best = dist.min()
    return float(vals[dist <= best + 1e-12].max())


def local_density(count_local: float, lo: float, hi: float, peers=()) -> float:
    """Vehicles per metre over the combined span; ``peers`` is [(N_u, lo, hi)]."""
    n = count_local + sum(p[0] for p in peers)
    lows = [lo] + [p[1] for p in peers]
    highs = [hi] + [p[2] for p in peers]
    span = max(highs) - min(lows)
    if span <= 0:
        log.warning("zero-length FOV span; density taken as zero")
        return 0.0
    return n / span


def rule_based_speed(leader_gaps, leader_speeds, v_do: float, v_max: float,
                     lookahead: float = 200.0) -> np.ndarray:
    """Per-lane speed: the nearest downstream vehicle's speed if within lookahead, else v_do.

    ``leader_gaps[l]`` is the distance to the nearest vehicle ahead in lane l
    (None or inf when there is none).
    """
    out = []
    for gap, v in zip(leader_gaps, leader_speeds):
        if gap is None or not np.isfinite(gap) or gap > lookahead:
            out.append(min(v_do, v_max))
        else:
            out.append(float(v))
    return np.array(out)


def reference_speed_filter(lane_speeds, current_lane: int, predicted_lanes, signal: int = 0,
                           n_lanes: int | None = None, epsilon: float = 0.1) -> np.ndarray:
    """Mask per-stage lane speeds for the lateral-free (1D) planner.

    ``lane_speeds`` is (N+1, N_l) or (N_l,); ``predicted_lanes`` gives the
    planner's lane at each stage (1-based); ``signal`` is -1, 0 or +1 (towards
    lower or higher lane index). Lanes that are neither current, predicted at
    that stage, nor signalled get ``epsilon``.
    """
    v = np.array(lane_speeds, dtype=float)
    pred = np.asarray(predicted_lanes, dtype=int)
    if v.ndim == 1:
        v = np.tile(v, (len(pred), 1))
    n_l = v.shape[1] if n_lanes is None else n_lanes
    keep = np.zeros_like(v, dtype=bool)
    keep[:, current_lane - 1] = True
    keep[np.arange(len(pred)), pred - 1] = True
    if signal:
        target = current_lane + int(np.sign(signal))
        if 1 <= target <= n_l:
            keep[:, target - 1] = True
    v[~keep] = epsilon
    return v


@dataclass
class LaneDecision:
    lane: int
    speed: float
    path: str
    density: float


def assign_lane_speeds(local: list, peer_stats: list, leader_gaps, leader_speeds,
                       v_do: float, v_max: float, cfg: RsaConfig | None = None):
    """Full per-cycle assignment.

    ``local`` holds one LaneObservation per lane; ``peer_stats`` holds, per
    communicating CAV (in processing order), its per-lane tuples
    (mean_speed, lo, hi, count). Returns (list of LaneDecision, v_d).
    """
    cfg = cfg or RsaConfig()
    rule = rule_based_speed(leader_gaps, leader_speeds, v_do, v_max, cfg.lookahead)
    decisions = []
    for li, obs in enumerate(local):
        coverage = [(obs.lo, obs.hi)]
        fused = []
        spans = []
        for stats in peer_stats:
            mu, lo, hi, n = stats[li]
            area_u, coverage = unique_fov_area(coverage, [(lo, hi)], obs.width)
            nu = unique_count(area_u, obs.width * (hi - lo), n)
            fused.append((nu, mu))
            spans.append((nu, lo, hi))
        rho = local_density(obs.count, obs.lo, obs.hi, spans)
        total = obs.count + sum(nu for nu, _ in fused)
        if rho >= cfg.density_threshold and total > 0:
            decisions.append(LaneDecision(obs.lane, lane_reference_speed(obs, fused), "fused", rho))
        else:
            decisions.append(LaneDecision(obs.lane, float(rule[li]), "rule", rho))
    v_d = desired_speed([d.speed for d in decisions], v_do)
    return decisions, v_d
