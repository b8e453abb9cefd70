"""Direct multiple-shooting SQP for the per-vehicle maneuver problem.

Each iteration linearizes the RK4 shooting map around the current node states
and inputs, condenses the node deviations onto the input steps, and solves a
Gauss-Newton QP: the least-squares cost gives the Hessian, state/input boxes
and the lane normalization are hard rows, and the vehicle-limit and keep-out
constraints enter as L1 penalties through nonnegative slacks. A backtracking
line search on the exact-penalty merit (cost + rho * violations + rho *
shooting defects) globalizes the step; rho escalates when the converged
iterate still violates a penalized constraint.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .. import ego
from ..ego import D0, PSID, S, V, Y, ZETA, EgoParams
from ..road import RoadLink
from . import terms
from .config import OcpConfig
from .qp import QPFailure, solve_qp

HARD_TOL = 1e-6
KINK_BAND = 0.02


@dataclass
class ObstacleTrajectory:
    """Predicted motion of one neighbour over the horizon (stage 0 = now)."""

    s: np.ndarray
    y: np.ndarray
    v_s: np.ndarray
    v_y: np.ndarray
    a_y: np.ndarray
    length: float = 5.0
    width: float = 2.0
    decel: float = 6.0
    vid: int = -1
    is_cav: bool = False
    covariance: dict | None = None

    def __post_init__(self):
        for name in ("s", "y", "v_s", "v_y", "a_y"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.s)
        if any(len(getattr(self, k)) != n for k in ("y", "v_s", "v_y", "a_y")):
            raise ValueError("obstacle arrays must share the stage count")

    @classmethod
    def constant_velocity(cls, s0, y0, v, n_stages, dt, **kw):
        t = dt * np.arange(n_stages)
        z = np.zeros(n_stages)
        return cls(s0 + v * t, np.full(n_stages, float(y0)), np.full(n_stages, float(v)), z, z, **kw)


@dataclass
class OcpProblem:
    x0: np.ndarray
    road: RoadLink
    lane_refs: np.ndarray
    v_desired: float
    obstacles: list = field(default_factory=list)
    prior: np.ndarray | None = None
    ego_dims: tuple = (5.0, 2.0)
    locked_lane: bool = False

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if abs(self.x0[Y] * float(np.max(np.abs(self.road.curvature(self.x0[S]))))) >= 1.0:
            raise ego.SingularityError("initial state sits on the curvature singularity")

    @cached_property
    def pack(self) -> terms.ObstaclePack:
        return terms.ObstaclePack.from_list(self.obstacles)


@dataclass
class ManeuverPlan:
    t_p: float
    states: np.ndarray
    inputs: np.ndarray
    cost: float
    max_violation: float
    feasible: bool
    iterations: int = 0
    status: str = ""
    history: list = field(default_factory=list)

    @property
    def trajectory(self) -> np.ndarray:
        return self.states[:, [S, Y]]

    @property
    def first_inputs(self) -> tuple:
        return float(self.inputs[0, ego.AD]), float(self.states[1, PSID])

    @property
    def lane_weights(self) -> np.ndarray:
        return ego.lane_weights(self.states)

    @property
    def committed_lane(self) -> int:
        return int(np.argmax(self.lane_weights[1])) + 1

    def predicted_lanes(self) -> np.ndarray:
        return np.argmax(self.lane_weights, axis=1) + 1


class Infeasible(Exception):
    """The solver could not bring every penalized constraint within tolerance."""

    def __init__(self, plan: ManeuverPlan, reason: str = ""):
        super().__init__(reason or f"max violation {plan.max_violation:.3g}")
        self.plan = plan


def shift_inputs(inputs: np.ndarray, shift: float, dt: float) -> np.ndarray:
    """Warm start for a grid advanced by ``shift`` seconds (linear blend of held inputs)."""
    inputs = np.asarray(inputs, dtype=float)
    n = len(inputs)
    pos = np.arange(n) + shift / dt
    lo = np.minimum(np.floor(pos).astype(int), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = (pos - np.floor(pos))[:, None]
    return (1.0 - frac) * inputs[lo] + frac * inputs[hi]


class ManeuverSolver:
    def __init__(self, cfg: OcpConfig | None = None, params: EgoParams | None = None):
        self.cfg = cfg or OcpConfig()
        self.params = params or EgoParams()

    # ----------------------------------------------------------------- costs
    def _stage_outputs(self, prob: OcpProblem, X, with_jac=True):
        """Weighted least-squares rows for stages 1..N; returns (r, J) of shapes (N,m), (N,m,nx)."""
        cfg = self.cfg
        N = cfg.horizon_steps
        nl = prob.road.lane_count
        Xs = X[1:]
        refs = _stage_refs(prob.lane_refs, N)[1:]
        F, JF = terms.lane_dependent_batch(Xs, prob.road.lane_centers, refs)
        G, JG = terms.lane_independent_batch(Xs, prob.v_desired)
        wf = np.sqrt(cfg.lane_weights(nl))
        wg = np.sqrt(cfg.independent_weights())
        parts = [F * wf, G * wg]
        jparts = [JF * wf[None, :, None], JG * wg[None, :, None]]
        if prob.prior is not None:
            H, JH = terms.predictability_batch(Xs, np.asarray(prob.prior)[1:])
            wh = np.sqrt(cfg.prior_weights())[None, :] * np.r_[np.ones(N - 1), 0.0][:, None]
            parts.append(H * wh)
            jparts.append(JH * wh[:, :, None])
        return np.concatenate(parts, axis=1), np.concatenate(jparts, axis=1)

    def cost(self, prob: OcpProblem, X, U) -> float:
        r, _ = self._stage_outputs(prob, X)
        R = self.cfg.input_weights(prob.road.lane_count)
        return float(np.sum(r**2) + np.sum(R * U**2))

    # ----------------------------------------------------------- constraints
    def penalized_constraints(self, prob: OcpProblem, X, cutoff=None):
        """Residuals c >= 0 and Jacobians wrt stage states; rows tagged with their stage."""
        cfg = self.cfg
        N = cfg.horizon_steps
        stages = np.arange(1, N + 1)
        c_lim, J_lim = terms.vehicle_limit_batch(X[1:], prob.road, cfg, self.params)
        vals = [c_lim.ravel()]
        jacs = [J_lim.reshape(-1, X.shape[1])]
        rows = [np.repeat(stages, 2)]
        c_t, J_t = terms.terminal_lateral_residuals(X[N], cfg, prob.road.y_min, prob.road.y_max)
        vals.append(c_t)
        jacs.append(J_t)
        rows.append(np.array([N, N]))
        pack = prob.pack
        if len(pack):
            g, Jg = terms.collision_stack(X[1:], pack, stages, cfg, prob.ego_dims, terminal_stage=N)
            keep = np.ones_like(g, dtype=bool) if cutoff is None else g < cutoff
            vals.append(g[keep])
            jacs.append(Jg[keep])
            rows.append(np.broadcast_to(stages, g.shape)[keep])
            if cutoff is not None:
                # near psi = 0 the residual has a concave kink; add both smooth branches
                near = np.abs(np.sin(X[1:, ego.PSI])) < KINK_BAND
                sel = keep & near[None, :]
                if sel.any():
                    cols = np.nonzero(sel.any(axis=0))[0]
                    sub = sel[:, cols]
                    for branch in (1.0, -1.0):
                        gb, Jb = terms.collision_stack(X[1:][cols], pack, stages[cols], cfg,
                                                       prob.ego_dims, N, branch)
                        vals.append(gb[sub])
                        jacs.append(Jb[sub])
                        rows.append(np.broadcast_to(stages[cols], gb.shape)[sub])
        return np.concatenate(vals), np.vstack(jacs), np.concatenate(rows)

    def _hard_layout(self, prob: OcpProblem):
        cfg = self.cfg
        nl = prob.road.lane_count
        vmax = prob.road.speed_limit
        comps = [Y, V, ZETA, PSID] + [D0 + i for i in range(nl - 1)]
        lo = [prob.road.y_min, 0.0, 0.0, cfg.heading_command_bounds[0]] + [0.0] * (nl - 1)
        hi = [prob.road.y_max, vmax, vmax, cfg.heading_command_bounds[1]] + [1.0] * (nl - 1)
        return comps, np.array(lo), np.array(hi)

    def hard_violation(self, prob: OcpProblem, X, U) -> float:
        comps, lo, hi = self._hard_layout(prob)
        Xs = X[1:]
        v = np.maximum(lo - Xs[:, comps], 0).sum() + np.maximum(Xs[:, comps] - hi, 0).sum()
        dn = 1.0 - Xs[:, D0:].sum(axis=1)
        v += np.maximum(-dn, 0).sum() + np.maximum(dn - 1.0, 0).sum()
        if self.cfg.s_max is not None:
            v += np.maximum(Xs[:, S] - self.cfg.s_max, 0).sum()
        ulo, uhi = self._input_bounds(prob)
        v += np.maximum(ulo - U, 0).sum() + np.maximum(U - uhi, 0).sum()
        return float(v)

    def _input_bounds(self, prob):
        lo, hi = self.cfg.input_bounds(prob.road.lane_count)
        if prob.locked_lane:
            lo[ego.UD0:] = 0.0
            hi[ego.UD0:] = 0.0
        return lo, hi

    def violation(self, prob, X) -> float:
        c, _, _ = self.penalized_constraints(prob, X)
        return float(np.sum(np.maximum(-c, 0.0)))

    def max_violation(self, prob, X) -> float:
        c, _, _ = self.penalized_constraints(prob, X)
        return float(max(np.max(-c), 0.0)) if len(c) else 0.0

    def _defects(self, prob, X, U):
        nxt = ego.rk4_batch(X[:-1], U, self.cfg.horizon_dt, prob.road, self.params)
        return nxt - X[1:]

    def merit(self, prob, X, U, rho) -> float:
        return (self.cost(prob, X, U)
                + rho * (self.violation(prob, X) + np.abs(self._defects(prob, X, U)).sum()
                         + self.hard_violation(prob, X, U)))

    # ----------------------------------------------------------------- solve
    def solve(self, prob: OcpProblem, warm_start=None, t_p: float = 0.0,
              candidates=()) -> ManeuverPlan:
        """Solve the OCP; raises ``Infeasible`` carrying the best plan found.

        ``candidates`` are extra initial input sequences (for example a lane
        change guess). Each gets a short SQP run of at most
        ``cfg.candidate_iters`` iterations; the cheapest feasible result wins.
        """
        cfg = self.cfg
        N = cfg.horizon_steps
        nu = ego.input_dim(prob.road.lane_count)
        ulo, uhi = self._input_bounds(prob)
        if warm_start is None:
            U0 = np.zeros((N, nu))
        elif isinstance(warm_start, ManeuverPlan):
            U0 = np.array(warm_start.inputs, dtype=float)
        else:
            U0 = np.array(warm_start, dtype=float)
        U0 = np.clip(U0, ulo, uhi)
        max_iters = 1 if cfg.single_iteration else cfg.max_iters
        U, it, status, history = self._sqp(prob, U0, max_iters, ulo, uhi)
        plan = self._finalize(prob, U, t_p, it, status, history)
        total = it
        if warm_start is not None:
            warm = self._finalize(prob, U0, t_p, 0, "warm_start", [])
            if warm.feasible and (not plan.feasible or warm.cost <= plan.cost):
                warm.history = history
                plan = warm
        for U_c in candidates:
            U_c = np.clip(np.array(U_c, dtype=float), ulo, uhi)
            Uc, itc, stc, hc = self._sqp(prob, U_c, min(max_iters, cfg.candidate_iters), ulo, uhi)
            total += itc
            alt = self._finalize(prob, Uc, t_p, itc, "candidate:" + stc, hc)
            if alt.feasible and (not plan.feasible or alt.cost < plan.cost):
                plan = alt
        if not plan.feasible:
            # recovery starts: hold the lane at a constant acceleration command
            for U_r in self._recovery_starts(prob, ulo, uhi):
                raw = self._finalize(prob, U_r, t_p, 0, "recovery:rollout", [])
                if raw.feasible and (not plan.feasible or raw.cost < plan.cost):
                    plan = raw
                Ur, itr, str_, hr = self._sqp(prob, U_r, min(max_iters, cfg.candidate_iters),
                                              ulo, uhi)
                total += itr
                alt = self._finalize(prob, Ur, t_p, itr, "recovery:" + str_, hr)
                if alt.feasible and (not plan.feasible or alt.cost < plan.cost):
                    plan = alt
        plan.iterations = total
        if not plan.feasible:
            raise Infeasible(plan, f"{plan.status}; max violation {plan.max_violation:.3g}")
        return plan

    def _sqp(self, prob: OcpProblem, U, max_iters, ulo, uhi):
        cfg = self.cfg
        X = ego.rollout(prob.x0, U, cfg.horizon_dt, prob.road, self.params)
        rho = cfg.penalty_initial
        phi = self.merit(prob, X, U, rho)
        history = []
        status = "max_iters"
        it = 0
        while it < max_iters:
            it += 1
            try:
                dU, dX, pred = self._qp_step(prob, X, U, rho, ulo, uhi)
            except QPFailure as exc:
                status = f"qp_failure:{exc}"
                break
            step = float(np.max(np.abs(dU))) if dU.size else 0.0
            history.append({"iteration": it, "merit": phi, "predicted_decrease": pred,
                            "step": step, "penalty": rho})
            if pred <= 1e-6 * (1.0 + abs(phi)) or step < cfg.step_tol:
                if self.max_violation(prob, X) > cfg.tol_viol and rho < cfg.penalty_max:
                    rho = min(rho * cfg.penalty_growth, cfg.penalty_max)
                    phi = self.merit(prob, X, U, rho)
                    continue
                status = "converged"
                break
            alpha = 1.0
            accepted = False
            while alpha >= 1e-3:
                Xn, Un = X + alpha * dX, U + alpha * dU
                phin = self.merit(prob, Xn, Un, rho)
                if phin <= phi - 1e-4 * alpha * pred:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                if self.max_violation(prob, X) > cfg.tol_viol and rho < cfg.penalty_max:
                    rho = min(rho * cfg.penalty_growth, cfg.penalty_max)
                    phi = self.merit(prob, X, U, rho)
                    continue
                status = "line_search_stalled"
                break
            X, U, phi = Xn, np.clip(Un, ulo, uhi), phin
            history[-1]["alpha"] = alpha
            history[-1]["violation"] = self.max_violation(prob, X)
        return U, it, status, history

    def _recovery_starts(self, prob, ulo, uhi):
        cfg = self.cfg
        N, dt = cfg.horizon_steps, cfg.horizon_dt
        nu = len(ulo)
        spans = sorted({N, max(N // 4, 1)}, reverse=True)
        for a in cfg.recovery_accels:
            for k in spans:
                U = np.zeros((N, nu))
                U[:k, 0] = a
                # release the comfort headway slack first
                U[0, 2] = -prob.x0[ZETA] / dt
                yield np.clip(U, ulo, uhi)

    def _finalize(self, prob, U, t_p, iterations, status, history) -> ManeuverPlan:
        X = ego.rollout(prob.x0, U, self.cfg.horizon_dt, prob.road, self.params)
        viol = self.max_violation(prob, X)
        hard = self.hard_violation(prob, X, U)
        feasible = viol <= self.cfg.tol_viol and hard <= HARD_TOL
        return ManeuverPlan(t_p=t_p, states=X, inputs=U.copy(), cost=self.cost(prob, X, U),
                            max_violation=max(viol, hard), feasible=feasible,
                            iterations=iterations, status=status, history=history)

    def _qp_step(self, prob, X, U, rho, ulo, uhi):
        cfg = self.cfg
        N, dt = cfg.horizon_steps, cfg.horizon_dt
        nx = X.shape[1]
        nu = U.shape[1]
        nU = N * nu
        xn, Ak, Bk = ego.rk4_batch_jac(X[:-1], U, dt, prob.road, self.params)
        defect = xn - X[1:]
        Sx = np.zeros((N + 1, nx, nU))
        e = np.zeros((N + 1, nx))
        for k in range(N):
            Sx[k + 1] = Ak[k] @ Sx[k]
            Sx[k + 1][:, k * nu:(k + 1) * nu] += Bk[k]
            e[k + 1] = Ak[k] @ e[k] + defect[k]

        r, Jr = self._stage_outputs(prob, X)
        r0 = (r + np.einsum("kmx,kx->km", Jr, e[1:])).ravel()
        M = np.einsum("kmx,kxn->kmn", Jr, Sx[1:]).reshape(-1, nU)
        Rw = np.tile(self.cfg.input_weights(prob.road.lane_count), N)
        Uf = U.ravel()
        hess = 2.0 * (M.T @ M + np.diag(Rw))
        grad = 2.0 * (M.T @ r0 + Rw * Uf)

        c, Jc, st = self.penalized_constraints(prob, X, cutoff=cfg.collision_row_cutoff)
        C = np.einsum("rx,rxn->rn", Jc, Sx[st])
        c0 = c + np.einsum("rx,rx->r", Jc, e[st])
        n_p = len(c0)

        comps, slo, shi = self._hard_layout(prob)
        Sh = Sx[1:][:, comps, :].reshape(-1, nU)
        base = (X[1:, comps] + e[1:, comps]).ravel()
        hlo = np.tile(slo, N) - base
        hhi = np.tile(shi, N) - base
        dsum = Sx[1:, D0:, :].sum(axis=1)
        dn_base = 1.0 - (X[1:, D0:] + e[1:, D0:]).sum(axis=1)
        rows_h = [Sh, -dsum]
        lo_h = [hlo, -dn_base]
        hi_h = [hhi, 1.0 - dn_base]
        if cfg.s_max is not None:
            rows_h.append(Sx[1:, S, :])
            lo_h.append(np.full(N, -np.inf))
            hi_h.append(cfg.s_max - X[1:, S] - e[1:, S])

        # slacks only on rows violated at the linearization point; a zero step
        # already satisfies the others, so keeping them hard leaves the QP feasible
        viol = np.flatnonzero(c0 < 0.0)
        n_v = len(viol)
        nz = nU + n_v
        P = np.zeros((nz, nz))
        P[:nU, :nU] = hess + 1e-9 * np.eye(nU)
        q = np.r_[grad, np.full(n_v, rho)]
        Hrows = np.vstack(rows_h)
        A = np.zeros((n_p + n_v + len(Hrows) + nU, nz))
        A[:n_p, :nU] = C
        A[viol, nU + np.arange(n_v)] = 1.0
        A[n_p:n_p + n_v, nU:] = np.eye(n_v)
        A[n_p + n_v:n_p + n_v + len(Hrows), :nU] = Hrows
        A[n_p + n_v + len(Hrows):, :nU] = np.eye(nU)
        lo = np.r_[-c0, np.zeros(n_v), np.concatenate(lo_h), np.tile(ulo, N) - Uf]
        hi = np.r_[np.full(n_p + n_v, np.inf), np.concatenate(hi_h), np.tile(uhi, N) - Uf]
        z = solve_qp(P, q, A, lo, hi, backend=cfg.qp_backend)
        dUf = z[:nU]
        t = np.maximum(z[nU:], 0.0)
        dX = (Sx @ dUf) + e
        res = r0 + M @ dUf
        model = float(res @ res + np.sum(Rw * (Uf + dUf) ** 2) + rho * t.sum())
        # the model at zero step; branch rows can count one violation twice,
        # so the merit value is not a valid reference
        model0 = float(r0 @ r0 + np.sum(Rw * Uf**2) + rho * np.maximum(-c0, 0.0).sum())
        return dUf.reshape(N, nu), dX, model0 - model


def lane_change_guess(x0, target: int, road: RoadLink, cfg: OcpConfig,
                      params: EgoParams | None = None, lateral_rate: float = 0.5 / 1.4) -> np.ndarray:
    """Input sequence that steers toward ``target`` lane at constant speed.

    The heading command realises a first-order approach of the target centre
    (lateral speed ``lateral_rate * offset``) and the lane variables jump to
    the target as fast as their rate bounds allow.
    """
    params = params or EgoParams()
    nl = road.lane_count
    N, dt = cfg.horizon_steps, cfg.horizon_dt
    lo, hi = cfg.input_bounds(nl)
    y_ref = float(road.lane_centers[target - 1])
    d_ref = ego.one_hot_lanes(target, nl)
    sin_max = np.sin(cfg.heading_command_bounds[1])
    U = np.zeros((N, ego.input_dim(nl)))
    x = np.asarray(x0, dtype=float).copy()
    for k in range(N):
        psi_des = np.arcsin(np.clip(lateral_rate * (y_ref - x[Y]) / max(x[V], 1.0), -sin_max, sin_max))
        U[k, ego.DPSI] = (psi_des - x[PSID]) / dt
        U[k, ego.UD0:] = (d_ref - x[D0:]) / dt
        U[k] = np.clip(U[k], lo, hi)
        x = ego.rk4_step(x, U[k], dt, road, params)
    return U


def _stage_refs(lane_refs, N):
    refs = np.asarray(lane_refs, dtype=float)
    if refs.ndim == 1:
        refs = np.tile(refs, (N + 1, 1))
    return refs
