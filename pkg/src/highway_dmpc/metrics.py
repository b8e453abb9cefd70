"""Aggregate traffic and fuel metrics over the evaluation window.

Trajectory records are sampled every ``dt`` seconds; each sample stands for
the interval [t, t + dt). Time spent and distance driven are accumulated from
samples whose time falls inside the window.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsConfig:
    c0: float = 1.5e-4
    c1: float = 2.0e-5
    c2: float = 1.0e-6
    c3: float = 3.0e-8
    c4: float = 1.2e-4
    idle_rate: float = 1.5e-4
    hold_time: float = 2.0
    warmup_fraction: float = 0.9

    def __post_init__(self):
        if min(self.c0, self.c1, self.c2, self.c3, self.c4, self.idle_rate) < 0:
            raise ValueError("fuel coefficients must be nonnegative")
        if self.hold_time < 0 or not 0 < self.warmup_fraction <= 1:
            raise ValueError("hold_time >= 0 and 0 < warmup_fraction <= 1 required")


def fuel_rate(v, a, cfg: MetricsConfig | None = None):
    """Polynomial fuel-rate proxy in L/s; braking adds nothing."""
    c = cfg or MetricsConfig()
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    if np.any(v < 0):
        raise ValueError("speed must be nonnegative")
    rate = c.c0 + c.c1 * v + c.c2 * v**2 + c.c3 * v**3 + c.c4 * np.maximum(a, 0.0) * v
    out = np.maximum(c.idle_rate, rate)
    return float(out) if out.ndim == 0 else out


def density(tts: float, length: float, t_e: float) -> float:
    if t_e <= 0:
        raise ValueError("evaluation window must have positive duration")
    return tts / (length * t_e)


def flow(tdt: float, length: float, t_e: float) -> float:
    if t_e <= 0:
        raise ValueError("evaluation window must have positive duration")
    return tdt / (length * t_e)


def fuel_percentages(fc: float, fc_b: float, rfc: float, rfc_b: float) -> dict:
    """Reductions relative to a baseline run; ``delta_rfc`` is the raw fraction."""
    if fc_b <= 0:
        raise ValueError("baseline fuel consumption must be positive")
    fc_pct = 100.0 * (1.0 - fc / fc_b)
    afc_pct = fc_pct - 100.0 * (rfc - rfc_b) / fc_b
    delta = (fc - rfc) / fc_b
    return {"fc_pct": fc_pct, "afc_pct": afc_pct, "delta_rfc": delta, "delta_rfc_pct": 100.0 * delta}


def evaluation_window(times: np.ndarray, occupancy: np.ndarray, end: float,
                      fraction: float = 0.9) -> tuple:
    """First instant occupancy reaches ``fraction`` of its maximum, up to ``end``."""
    if len(times) == 0 or occupancy.max() <= 0:
        return (0.0, end)
    idx = int(np.argmax(occupancy >= fraction * occupancy.max()))
    start = float(times[idx])
    if start >= end:
        raise ValueError("evaluation window is empty")
    return (start, end)


def lane_change_count(times: np.ndarray, lanes: np.ndarray, hold_time: float) -> int:
    """Lane changes whose new lane is held for at least ``hold_time``.

    Runs of equal lane index shorter than ``hold_time`` are transients and are
    skipped, so an abandoned change that returns in time counts zero. The last
    run is always treated as held. A committed move across k lanes counts k.
    """
    lanes = np.asarray(lanes)
    times = np.asarray(times, dtype=float)
    if len(lanes) < 2:
        return 0
    starts = np.r_[0, np.nonzero(np.diff(lanes))[0] + 1]
    ends = np.r_[starts[1:], len(lanes)]
    count = 0
    committed = lanes[0]
    for k, (i, j) in enumerate(zip(starts, ends)):
        if k == 0:
            continue
        last = j == len(lanes)
        held = last or times[j] - times[i] >= hold_time
        if held and lanes[i] != committed:
            count += int(abs(int(lanes[i]) - int(committed)))
            committed = lanes[i]
    return count


@dataclass
class Trajectories:
    """Columnar per-sample records (one row per vehicle per step)."""

    t: np.ndarray
    vid: np.ndarray
    is_cav: np.ndarray
    s: np.ndarray
    y: np.ndarray
    v_s: np.ndarray
    v_y: np.ndarray
    a: np.ndarray
    lane: np.ndarray

    def speed(self):
        return np.hypot(self.v_s, self.v_y)


def aggregate(tr: Trajectories, dt: float, length: float, end_time: float,
              cfg: MetricsConfig | None = None) -> dict:
    """AggregateReport fields over the evaluation window."""
    cfg = cfg or MetricsConfig()
    times, occ = np.unique(tr.t, return_counts=True)
    start, end = evaluation_window(times, occ, end_time, cfg.warmup_fraction)
    t_e = end - start
    inside = (tr.t >= start - 1e-9) & (tr.t < end - 1e-9)
    v = np.maximum(tr.v_s, 0.0)
    fr = fuel_rate(v, tr.a, cfg) if len(v) else np.zeros(0)

    def summarize(mask):
        m = inside & mask
        tts = dt * np.count_nonzero(m)
        tdt = dt * float(np.sum(v[m]))
        fc = dt * float(np.sum(fr[m]))
        mu = tdt / tts if tts > 0 else 0.0
        rfc = float(fuel_rate(mu, 0.0, cfg)) * tts
        ids = np.unique(tr.vid[mask])
        n_lc = 0
        for vid in ids:
            sel = tr.vid == vid
            n_lc += lane_change_count(tr.t[sel], tr.lane[sel], cfg.hold_time)
        rho = density(tts, length, t_e)
        return {
            "tts": tts, "tdt": tdt, "density": rho, "mean_speed": mu,
            "flow": flow(tdt, length, t_e),
            "fc": fc, "rfc": rfc,
            "fc_per_100km": 100.0 * fc / (tdt / 1000.0) if tdt > 0 else 0.0,
            "rfc_per_100km": 100.0 * rfc / (tdt / 1000.0) if tdt > 0 else 0.0,
            "vehicles": int(len(ids)),
            "lane_changes": int(n_lc),
            "lane_changes_per_vehicle": n_lc / len(ids) if len(ids) else 0.0,
        }

    report = {"window": {"start": start, "end": end, "duration": t_e},
              "harmonization": harmonization(tr, dt, inside),
              "fleet": summarize(np.ones(len(tr.t), dtype=bool)),
              "cav": summarize(tr.is_cav.astype(bool)),
              "hdv": summarize(~tr.is_cav.astype(bool))}
    return report


def harmonization(tr: Trajectories, dt: float, mask=None) -> dict:
    """Per-vehicle integral of |a| and the time-averaged cross-vehicle speed spread."""
    m = np.ones(len(tr.t), dtype=bool) if mask is None else mask
    ids = np.unique(tr.vid[m])
    if len(ids) == 0:
        return {"abs_accel_per_vehicle": 0.0, "speed_std": 0.0}
    acc = np.array([dt * np.abs(tr.a[m & (tr.vid == i)]).sum() for i in ids])
    stds = []
    for tk in np.unique(tr.t[m]):
        sel = m & (tr.t == tk)
        if np.count_nonzero(sel) > 1:
            stds.append(np.std(tr.v_s[sel]))
    return {"abs_accel_per_vehicle": float(acc.mean()),
            "speed_std": float(np.mean(stds)) if stds else 0.0}


def travel_times(entries: list) -> dict:
    """Mean travel time of vehicles that completed the link, overall and per class."""
    done = [e for e in entries if e.get("t_exit") is not None]
    out = {}
    for name, sel in (("fleet", done), ("cav", [e for e in done if e["is_cav"]]),
                      ("hdv", [e for e in done if not e["is_cav"]])):
        tt = [e["t_exit"] - e["t_enter"] for e in sel]
        out[name] = float(np.mean(tt)) if tt else None
    return out


def compare_to_baseline(report: dict, baseline: dict) -> dict:
    """Fuel percentages per class against a baseline report (distance-normalised)."""
    out = {}
    for cls in ("fleet", "cav", "hdv"):
        r, b = report[cls], baseline[cls]
        if b["fc_per_100km"] <= 0:
            out[cls] = None
            continue
        out[cls] = fuel_percentages(r["fc_per_100km"], b["fc_per_100km"],
                                    r["rfc_per_100km"], b["rfc_per_100km"])
    return out
