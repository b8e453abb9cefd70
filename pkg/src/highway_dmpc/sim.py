"""Deterministic discrete-time highway world.

Every step: spawn arrivals, publish a snapshot (with the previous step's
messages), let each CAV predict, assign speeds and plan, let each HDV decide,
integrate everybody, check overlaps, deliver new messages within range and
remove vehicles past the link end. Planners run one after another in id
order against the same snapshot, so results never depend on scheduling.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import ego, hdv
from .config import ScenarioConfig
from .dmpc import terms
from .dmpc.solver import (Infeasible, ManeuverPlan, ManeuverSolver, OcpProblem, lane_change_guess,
                          shift_inputs)
from .ego import A, PSI, PSID, S, V, Y
from .metrics import Trajectories
from .ovsp import InfoMatrix, LaneStat, Measurement, Predictor, synchronize_plan
from .road import lane_center, lane_of_clipped
from .rsa import LaneObservation, assign_lane_speeds, reference_speed_filter

log = logging.getLogger(__name__)

LATERAL_OVERLAP_MARGIN = 0.5     # m added to half-width sums when looking for a leader
LANE_SETTLED = 0.3               # m from the target centre at which a move is complete


@dataclass
class Vehicle:
    vid: int
    is_cav: bool
    driver: hdv.DriverParams
    t_enter: float
    length: float
    width: float
    s: float = 0.0
    y: float = 0.0
    v: float = 0.0
    v_y: float = 0.0
    a: float = 0.0
    x: np.ndarray | None = None          # full augmented state (planned CAVs only)
    lc: hdv.LaneChangeState | None = None
    predictor: Predictor | None = None
    plan: ManeuverPlan | None = None
    lane: int = 1
    last_lane_change: float = -1e9

    def sync_from_state(self, road):
        if self.x is None:
            return
        x = self.x
        k = float(road.curvature(x[S]))
        self.s, self.y, self.a = float(x[S]), float(x[Y]), float(x[A])
        self.v = float(x[V] * np.cos(x[PSI]) / (1.0 - x[Y] * k))
        self.v_y = float(x[V] * np.sin(x[PSI]))


@dataclass(frozen=True)
class Snapshot:
    t: float
    ids: np.ndarray
    is_cav: np.ndarray
    s: np.ndarray
    y: np.ndarray
    v_s: np.ndarray
    v_y: np.ndarray
    a: np.ndarray
    lane: np.ndarray
    length: np.ndarray
    width: np.ndarray
    mailbox: dict

    def index(self, vid):
        return int(np.searchsorted(self.ids, vid))


@dataclass
class RunResult:
    config: ScenarioConfig
    trajectories: Trajectories
    entries: list
    end_time: float
    collisions: list
    hyperellipse_violations: list
    solver: dict
    rsa_log: list = field(default_factory=list)
    solver_trace: list = field(default_factory=list)
    conservation_ok: bool = True


class Simulation:
    def __init__(self, cfg: ScenarioConfig, trace_solver: bool = False):
        self.cfg = cfg
        sc = cfg.scenario
        self.road = cfg.road
        self.dt = sc.dt_s
        self.mode = sc.planner
        self.trace_solver = trace_solver
        self.solver = ManeuverSolver(cfg.ocp, cfg.ego)
        self.rng_arrivals = np.random.default_rng([sc.seed, 0])
        self.rng_lanes = np.random.default_rng([sc.seed, 1])
        self.vehicles: dict[int, Vehicle] = {}
        self.queue: deque = deque()
        self.n_arrivals = 0
        self.next_arrival = self._interarrival()
        self.mailbox: dict = {}
        self.entries: list = []
        self.records: list = []
        self.collisions: list = []
        self.hyper_violations: list = []
        self._overlapping: set = set()
        self._hyper_active: set = set()
        self.stats = {"calls": 0, "infeasible": 0, "fallback_steps": 0, "iterations": 0,
                      "candidates": 0}
        self.trace: list = []
        self.rsa_log: list = []
        self.n_exited = 0

    # ----------------------------------------------------------- arrivals
    def _interarrival(self):
        q = self.cfg.scenario.demand
        return np.inf if q <= 0 else float(self.rng_arrivals.exponential(3600.0 / q))

    def _arrivals(self, t):
        cap = self.cfg.scenario.max_vehicles
        while self.next_arrival <= t + 1e-9 and (cap is None or self.n_arrivals < cap):
            vid = self.n_arrivals
            rng = np.random.default_rng([self.cfg.scenario.seed, 2, vid])
            is_cav = bool(rng.random() < self.cfg.scenario.penetration)
            driver = hdv.sample_driver(rng, self.cfg.drivers)
            self.queue.append((vid, is_cav, driver, self.next_arrival))
            self.n_arrivals += 1
            self.next_arrival += self._interarrival()

    def _entry_leader(self, lane):
        yl = lane_center(self.road, lane)
        best = None
        for veh in self.vehicles.values():
            if abs(veh.y - yl) < 0.5 * (veh.width + self.cfg.scenario.vehicle_width) + LATERAL_OVERLAP_MARGIN:
                if best is None or veh.s < best.s:
                    best = veh
        return best

    def _entry_speed_and_gap(self, lane, is_cav, driver):
        sc = self.cfg.scenario
        lead = self._entry_leader(lane)
        v0 = min(driver.v_do, self.road.speed_limit)
        if lead is None:
            return v0, True
        if lead.s < 2.0 * sc.sensor_range:
            v0 = min(v0, lead.v)
        if is_cav:
            ocp = self.cfg.ocp
            _, lam = terms.hyperellipse_axes(0.0, (sc.vehicle_length, sc.vehicle_width),
                                             (lead.length, lead.width), ocp.min_lateral_margin,
                                             ocp.min_longitudinal_margin)
            lam_b = terms.brake_safety_margin(0.0, v0, ocp.max_decel_cav, lead.s, lead.v,
                                              ocp.max_decel(lead.is_cav))
            need = lam + lam_b + ocp.comfort_headway * v0
            return v0, lead.s >= need
        gap = lead.s - 0.5 * (lead.length + sc.vehicle_length)
        return v0, gap >= driver.cc0 + driver.cc1 * v0

    def _release(self, t):
        sc = self.cfg.scenario
        while self.queue:
            vid, is_cav, driver, t_arr = self.queue[0]
            options = []
            for lane in range(1, self.road.lane_count + 1):
                v0, ok = self._entry_speed_and_gap(lane, is_cav, driver)
                if ok:
                    options.append((lane, v0))
            if not options:
                break
            lane, v0 = options[int(self.rng_lanes.integers(len(options)))]
            self.queue.popleft()
            y0 = lane_center(self.road, lane)
            veh = Vehicle(vid, is_cav, driver, t, sc.vehicle_length, sc.vehicle_width,
                          s=0.0, y=y0, v=v0, lane=lane)
            veh.lc = hdv.LaneChangeState(target=lane)
            if is_cav and self.mode != "baseline":
                n_l = self.road.lane_count
                veh.x = np.r_[0.0, y0, v0, 0.0, 0.0, 0.0, 0.0, ego.one_hot_lanes(lane, n_l)]
                veh.predictor = Predictor(self.cfg.ocp.horizon_steps, self.cfg.ocp.horizon_dt,
                                          self.cfg.ovsp, self.cfg.ocp.max_decel_hdv,
                                          self.cfg.ocp.max_decel_cav,
                                          tuple(self.road.lane_centers))
            self.vehicles[vid] = veh
            self.entries.append({"vid": vid, "is_cav": is_cav, "t_arrival": t_arr, "t_enter": t,
                                 "t_exit": None, "lane": lane, "v_do": driver.v_do})

    # ----------------------------------------------------------- snapshot
    def _snapshot(self, t) -> Snapshot:
        vs = [self.vehicles[k] for k in sorted(self.vehicles)]
        arr = lambda f: np.array([f(v) for v in vs], dtype=float)
        return Snapshot(
            t=t, ids=np.array([v.vid for v in vs], dtype=int),
            is_cav=np.array([v.is_cav for v in vs], dtype=bool),
            s=arr(lambda v: v.s), y=arr(lambda v: v.y), v_s=arr(lambda v: v.v),
            v_y=arr(lambda v: v.v_y), a=arr(lambda v: v.a),
            lane=np.array([v.lane for v in vs], dtype=int),
            length=arr(lambda v: v.length), width=arr(lambda v: v.width),
            mailbox=self.mailbox)

    # ----------------------------------------------------------- queries
    def _leader(self, snap: Snapshot, i: int):
        """Nearest vehicle ahead overlapping laterally: (bumper gap, v, a) or None."""
        ds = snap.s - snap.s[i]
        lat = np.abs(snap.y - snap.y[i]) < 0.5 * (snap.width + snap.width[i]) + LATERAL_OVERLAP_MARGIN
        cand = (ds > 0) | ((ds == 0) & (snap.ids > snap.ids[i]))
        cand &= lat
        cand[i] = False
        if not cand.any():
            return None
        j = np.flatnonzero(cand)[np.argmin(ds[cand])]
        return ds[j] - 0.5 * (snap.length[j] + snap.length[i]), snap.v_s[j], snap.a[j]

    def _lane_neighbors(self, snap: Snapshot, i: int) -> dict:
        out = {}
        lane = snap.lane[i]
        for l in (lane - 1, lane, lane + 1):
            if not 1 <= l <= self.road.lane_count:
                continue
            sel = snap.lane == l
            sel[i] = False
            ds = snap.s - snap.s[i]
            half = 0.5 * (snap.length + snap.length[i])
            ahead = sel & (ds >= 0)
            behind = sel & (ds < 0)
            lead = follow = None
            if ahead.any():
                j = np.flatnonzero(ahead)[np.argmin(ds[ahead])]
                lead = (ds[j] - half[j], snap.v_s[j])
            if behind.any():
                j = np.flatnonzero(behind)[np.argmax(ds[behind])]
                follow = (-ds[j] - half[j], snap.v_s[j])
            out[l] = hdv.LaneNeighbors(lead, follow)
        return out

    def fov_query(self, snap: Snapshot, i: int):
        """Visible vehicles (nearest ahead/behind per lane within range) and per-lane bounds."""
        r = self.cfg.scenario.sensor_range
        s_i = snap.s[i]
        ds = snap.s - s_i
        in_range = np.abs(ds) <= r
        in_range[i] = False
        meas, bounds, lane_vis = [], [], []
        for l in range(1, self.road.lane_count + 1):
            sel = in_range & (snap.lane == l)
            lo, hi = s_i - r, s_i + r
            vis = []
            ahead = sel & (ds >= 0)
            behind = sel & (ds < 0)
            if ahead.any():
                j = np.flatnonzero(ahead)[np.argmin(ds[ahead])]
                vis.append(j)
                hi = snap.s[j] + 0.5 * snap.length[j]
            if behind.any():
                j = np.flatnonzero(behind)[np.argmax(ds[behind])]
                vis.append(j)
                lo = snap.s[j] - 0.5 * snap.length[j]
            bounds.append((lo, hi))
            lane_vis.append(sorted(vis))
            for j in sorted(vis):
                meas.append(Measurement(int(snap.ids[j]), float(snap.s[j]), float(snap.y[j]),
                                        float(snap.v_s[j]), float(snap.v_y[j]),
                                        float(snap.length[j]), float(snap.width[j]),
                                        bool(snap.is_cav[j])))
        meas.sort(key=lambda m: m.vid)
        return meas, bounds, lane_vis

    # ----------------------------------------------------------- CAV planning
    def _plan_cav(self, veh: Vehicle, snap: Snapshot, i: int, t: float):
        cfg = self.cfg
        ocp = cfg.ocp
        n_l = self.road.lane_count
        meas, bounds, lane_vis = self.fov_query(snap, i)
        peers = snap.mailbox.get(veh.vid, {})
        preds = veh.predictor.assemble(t, peers, meas)

        local = []
        gaps, speeds = [], []
        for li, (lo, hi) in enumerate(bounds):
            vis = lane_vis[li]
            mu = float(np.mean(snap.v_s[vis])) if vis else 0.0
            local.append(LaneObservation(li + 1, mu, float(len(vis)), lo, hi, self.road.lane_width))
            ahead = [j for j in vis if snap.s[j] >= snap.s[i]]
            if ahead:
                gaps.append(float(snap.s[ahead[0]] - snap.s[i]))
                speeds.append(float(snap.v_s[ahead[0]]))
            else:
                gaps.append(None)
                speeds.append(0.0)
        peer_stats = []
        for pid in sorted(peers):
            lanes = peers[pid].lanes
            if len(lanes) == n_l:
                peer_stats.append([(ls.mean_speed, ls.lo, ls.hi, ls.count) for ls in lanes])
        decisions, v_d = assign_lane_speeds(local, peer_stats, gaps, speeds, veh.driver.v_do,
                                            self.road.speed_limit, cfg.rsa)
        v_l = np.array([d.speed for d in decisions])
        refs = np.tile(v_l, (ocp.horizon_steps + 1, 1))

        lane = veh.lane
        locked = veh.s < self.road.no_lane_change_zone
        signal = 0
        if self.mode == "1d":
            if not locked and t - veh.last_lane_change >= cfg.hdv.cooldown:
                signal = hdv.rbls_decision(lane, n_l, veh.v, self._lane_neighbors(snap, i),
                                           veh.driver, cfg.hdv)
            if veh.plan is not None:
                predicted = veh.plan.predicted_lanes()
            else:
                predicted = np.full(ocp.horizon_steps + 1, lane)
            refs = reference_speed_filter(refs, lane, predicted, signal, n_l, cfg.rsa.filter_epsilon)

        prior = None
        warm = None
        if veh.plan is not None:
            msg = InfoMatrix(veh.vid, veh.plan.t_p, veh.plan.trajectory)
            try:
                prior = synchronize_plan(msg, t, veh.s, veh.y, ocp.horizon_dt)
            except ValueError:
                prior = None
            warm = shift_inputs(veh.plan.inputs, t - veh.plan.t_p, ocp.horizon_dt)

        x0 = veh.x.copy()
        if locked:
            x0[ego.D0:] = ego.one_hot_lanes(lane, n_l)
        prob = OcpProblem(x0, self.road, refs, v_d, preds, prior,
                          (veh.length, veh.width), locked_lane=locked)
        self.stats["calls"] += 1
        if self.rsa_log is not None:
            self.rsa_log.append({"t": t, "vid": veh.vid, "v_d": v_d, "signal": signal,
                                 "lanes": [{"lane": d.lane, "v_l": d.speed, "path": d.path,
                                            "density": d.density} for d in decisions]})
        # seed a lane change toward a faster adjacent lane the current plan ignores
        candidates = []
        if not locked:
            target = veh.plan.predicted_lanes()[-1] if veh.plan is not None else lane
            for l in (lane - 1, lane + 1):
                if (1 <= l <= n_l and l != target
                        and refs[-1, l - 1] > refs[-1, lane - 1] + cfg.hdv.hysteresis):
                    candidates.append(lane_change_guess(x0, l, self.road, ocp, cfg.ego))
        self.stats["candidates"] += len(candidates)
        try:
            plan = self.solver.solve(prob, warm, t_p=t, candidates=candidates)
            feasible = True
        except Infeasible as exc:
            plan = exc.plan
            feasible = False
        self.stats["iterations"] += plan.iterations
        if self.trace_solver:
            self.trace.append({"t": t, "vid": veh.vid, "feasible": feasible,
                               "iterations": plan.iterations, "status": plan.status,
                               "max_violation": plan.max_violation, "history": plan.history})
        if not feasible:
            self.stats["infeasible"] += 1
            self.stats["fallback_steps"] += 1
            veh.plan = None
            return self._fallback_inputs(veh, snap, i, t), None, x0
        veh.plan = plan
        lanes_msg = tuple(LaneStat(o.mean_speed, o.lo, o.hi, o.count) for o in local)
        msg = InfoMatrix(veh.vid, t, plan.trajectory, lanes_msg, veh.length, veh.width,
                         ocp.max_decel_cav)
        return plan.inputs[0].copy(), msg, x0

    def _fallback_inputs(self, veh: Vehicle, snap: Snapshot, i: int, t: float):
        """Car following plus rule-based lane choice expressed as ego-model inputs."""
        cfg = self.cfg
        n_l = self.road.lane_count
        lead = self._leader(snap, i)
        gap, vl, al = (lead if lead is not None else (None, 0.0, 0.0))
        a_cmd = hdv.car_following_accel(veh.v, veh.a, gap, vl, al, veh.driver, self.dt, cfg.hdv)
        lo, hi = cfg.ocp.input_bounds(n_l)
        target = self._rbls_target(veh, snap, i, t)
        y_ref = lane_center(self.road, target)
        x = veh.x
        # heading that realises the lane-tracking lateral speed
        vy_des = cfg.hdv.lateral_gain / cfg.hdv.lateral_damping * (y_ref - x[Y])
        sin_max = np.sin(cfg.ocp.heading_command_bounds[1])
        psi_des = np.arcsin(np.clip(vy_des / max(x[V], 1.0), -sin_max, sin_max))
        u = np.zeros(ego.input_dim(n_l))
        u[ego.AD] = a_cmd
        u[ego.DPSI] = (psi_des - x[PSID]) / self.dt
        u[ego.UZETA] = 0.0
        u[ego.UD0:] = (ego.one_hot_lanes(target, n_l) - x[ego.D0:]) / self.dt
        return np.clip(u, lo, hi)

    def _rbls_target(self, veh: Vehicle, snap: Snapshot, i: int, t: float) -> int:
        cfg = self.cfg
        y_ref = lane_center(self.road, veh.lc.target)
        moving = veh.lc.target != veh.lane or abs(veh.y - y_ref) > LANE_SETTLED
        decision = 0
        if not moving:
            decision = hdv.rbls_decision(veh.lane, self.road.lane_count, veh.v,
                                         self._lane_neighbors(snap, i), veh.driver, cfg.hdv,
                                         s=veh.s, no_change_zone=self.road.no_lane_change_zone)
        return veh.lc.step(t, veh.lane, decision, cfg.hdv, moving)

    # ----------------------------------------------------------- step
    def step(self, t: float):
        self._arrivals(t)
        self._release(t)
        snap = self._snapshot(t)
        self._record(snap)
        controls = {}
        outbox = {}
        for i, vid in enumerate(snap.ids):
            veh = self.vehicles[int(vid)]
            if veh.x is not None:
                u, msg, x0 = self._plan_cav(veh, snap, i, t)
                controls[veh.vid] = ("cav", u, x0)
                if msg is not None:
                    outbox[veh.vid] = msg
            else:
                lead = self._leader(snap, i)
                gap, vl, al = (lead if lead is not None else (None, 0.0, 0.0))
                a = hdv.car_following_accel(veh.v, veh.a, gap, vl, al, veh.driver, self.dt,
                                            self.cfg.hdv)
                target = self._rbls_target(veh, snap, i, t)
                controls[veh.vid] = ("hdv", a, target)
        # integrate
        for vid in sorted(controls):
            veh = self.vehicles[vid]
            kind, u, extra = controls[vid]
            if kind == "cav":
                x = ego.rk4_step(extra, u, self.dt, self.road, self.cfg.ego)
                veh.x = ego.clamp_plant_state(x, self.road.speed_limit)
                veh.sync_from_state(self.road)
            else:
                veh.s, veh.v = hdv.integrate_longitudinal(veh.s, veh.v, u, self.dt)
                veh.a = u
                veh.y, veh.v_y = hdv.integrate_lateral(veh.y, veh.v_y,
                                                       lane_center(self.road, extra), self.dt,
                                                       self.cfg.hdv)
            new_lane = lane_of_clipped(self.road, veh.y)
            if new_lane != veh.lane:
                veh.lane = new_lane
                veh.last_lane_change = t + self.dt
        t_next = t + self.dt
        self._check_safety(t_next)
        # deliver messages produced this step (read next step)
        mailbox = {}
        r_c = self.cfg.scenario.comm_range
        for sid in sorted(outbox):
            s_send = snap.s[snap.index(sid)]
            for j, rid in enumerate(snap.ids):
                rid = int(rid)
                if rid == sid or self.vehicles[rid].x is None:
                    continue
                if abs(snap.s[j] - s_send) <= r_c:
                    mailbox.setdefault(rid, {})[sid] = outbox[sid]
        self.mailbox = mailbox
        # exits
        for vid in sorted(self.vehicles):
            if self.vehicles[vid].s > self.road.length:
                del self.vehicles[vid]
                self.n_exited += 1
                for e in self.entries:
                    if e["vid"] == vid:
                        e["t_exit"] = t_next
                        break

    def _check_safety(self, t):
        vs = [self.vehicles[k] for k in sorted(self.vehicles)]
        ocp = self.cfg.ocp
        overlapping = set()
        hyper = set()
        for a_i in range(len(vs)):
            vi = vs[a_i]
            for vj in vs[a_i + 1:]:
                ds = vj.s - vi.s
                if abs(ds) > 60.0:
                    continue
                dy = vj.y - vi.y
                key = (vi.vid, vj.vid)
                if abs(ds) < 0.5 * (vi.length + vj.length) and abs(dy) < 0.5 * (vi.width + vj.width):
                    overlapping.add(key)
                    if key not in self._overlapping:
                        self.collisions.append({"t": t, "ids": list(key),
                                                "classes": [vi.is_cav, vj.is_cav]})
                for ego_v, other in ((vi, vj), (vj, vi)):
                    if ego_v.x is None:
                        continue
                    psi = float(ego_v.x[PSI])
                    g, lam = terms.hyperellipse_axes(psi, (ego_v.length, ego_v.width),
                                                     (other.length, other.width),
                                                     ocp.min_lateral_margin,
                                                     ocp.min_longitudinal_margin)
                    res = ((other.y - ego_v.y) / g) ** 4 + ((other.s - ego_v.s) / lam) ** 4 - 1.0
                    if res < -ocp.tol_viol:
                        hk = (ego_v.vid, other.vid)
                        hyper.add(hk)
                        if hk not in self._hyper_active:
                            self.hyper_violations.append({"t": t, "ids": list(hk),
                                                          "residual": float(res)})
        self._overlapping = overlapping
        self._hyper_active = hyper

    def _record(self, snap: Snapshot):
        if len(snap.ids) == 0:
            return
        self.records.append(np.column_stack([
            np.full(len(snap.ids), snap.t), snap.ids, snap.is_cav, snap.s, snap.y, snap.v_s,
            snap.v_y, snap.a, snap.lane]))

    def run(self) -> RunResult:
        sc = self.cfg.scenario
        n_steps = int(round(sc.duration / self.dt))
        end = n_steps * self.dt
        conservation = True
        for k in range(n_steps):
            t = k * self.dt
            self.step(t)
            if len(self.entries) != len(self.vehicles) + self.n_exited:
                conservation = False
            cap = sc.max_vehicles
            if (cap is not None and self.n_arrivals >= cap and not self.queue
                    and not self.vehicles):
                end = (k + 1) * self.dt
                break
        rec = np.vstack(self.records) if self.records else np.zeros((0, 9))
        tr = Trajectories(t=rec[:, 0], vid=rec[:, 1].astype(int), is_cav=rec[:, 2].astype(bool),
                          s=rec[:, 3], y=rec[:, 4], v_s=rec[:, 5], v_y=rec[:, 6], a=rec[:, 7],
                          lane=rec[:, 8].astype(int))
        return RunResult(self.cfg, tr, self.entries, end, self.collisions, self.hyper_violations,
                         dict(self.stats), self.rsa_log, self.trace, conservation)


def run_scenario(cfg: ScenarioConfig, trace_solver: bool = False) -> RunResult:
    return Simulation(cfg, trace_solver).run()
