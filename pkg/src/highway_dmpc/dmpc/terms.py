"""Stage-wise cost outputs and constraint residuals of the maneuver OCP.

Every ``*_batch`` function takes ego states stacked as ``(n, nx)`` and returns
values plus exact Jacobians with respect to the ego state, so the SQP can
assemble Gauss-Newton models without finite differences. Constraint residuals
follow the convention ``c >= 0`` is feasible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ego import A, D0, PSI, PSID, S, V, Y, ZETA, EgoParams


def _full_lanes(X):
    d = X[:, D0:]
    return np.concatenate([d, 1.0 - d.sum(axis=1, keepdims=True)], axis=1)


def lane_dependent_batch(X, lane_centers, refs):
    """Lane-dependent outputs ``[d_l (y_e - y_l)]_l ++ [d_l (v_t - v_l)]_l``.

    ``refs`` has shape (n, N_l) so lane speeds can vary along the horizon.
    """
    n, nx = X.shape
    nl = len(lane_centers)
    d = _full_lanes(X)
    ey = X[:, Y, None] - lane_centers[None, :]
    ev = X[:, V, None] - refs
    F = np.concatenate([d * ey, d * ev], axis=1)
    J = np.zeros((n, 2 * nl, nx))
    J[:, :nl, Y] = d
    J[:, nl:, V] = d
    for m in range(nl - 1):
        J[:, m, D0 + m] += ey[:, m]
        J[:, nl + m, D0 + m] += ev[:, m]
        J[:, nl - 1, D0 + m] -= ey[:, nl - 1]
        J[:, 2 * nl - 1, D0 + m] -= ev[:, nl - 1]
    return F, J


def lane_dependent_cost(x, lane_centers, refs):
    F, _ = lane_dependent_batch(np.atleast_2d(x), np.asarray(lane_centers, float),
                                np.atleast_2d(np.asarray(refs, float)))
    return F[0]


def lane_independent_batch(X, v_d):
    n, nx = X.shape
    d = _full_lanes(X)
    v_d = np.broadcast_to(np.asarray(v_d, float), (n,))
    G = np.stack([X[:, V] - v_d, X[:, ZETA] - v_d, 1.0 - np.sum(d**2, axis=1)], axis=1)
    J = np.zeros((n, 3, nx))
    J[:, 0, V] = 1.0
    J[:, 1, ZETA] = 1.0
    J[:, 2, D0:] = -2.0 * d[:, :-1] + 2.0 * d[:, -1:]
    return G, J


def lane_independent_cost(x, v_d):
    return lane_independent_batch(np.atleast_2d(x), v_d)[0][0]


def predictability_batch(X, prior):
    """Deviation ``[s - s_prior, y_e - y_prior]`` from a synchronized prior plan."""
    n, nx = X.shape
    H = np.stack([X[:, S] - prior[:, 0], X[:, Y] - prior[:, 1]], axis=1)
    J = np.zeros((n, 2, nx))
    J[:, 0, S] = 1.0
    J[:, 1, Y] = 1.0
    return H, J


def predictability_cost(x, prior_stage):
    if prior_stage is None:
        return np.zeros(2)
    return predictability_batch(np.atleast_2d(x), np.atleast_2d(prior_stage))[0][0]


def _road_curvature(road, s):
    if road is None:
        return np.zeros_like(s), np.zeros_like(s)
    if np.isscalar(road):
        return np.full_like(s, float(road)), np.zeros_like(s)
    return road.curvature(s), road.curvature_slope(s)


def vehicle_limit_batch(X, road, cfg, params: EgoParams):
    """Friction-ellipse and turning-radius residuals, shape (n, 2)."""
    n, nx = X.shape
    k, dk = _road_curvature(road, X[:, S])
    v = X[:, V]
    yaw_rate = params.tau_psi * (X[:, PSID] - X[:, PSI])
    a_n = v**2 * k + yaw_rate * v
    eta2 = cfg.normalization**2
    c = np.empty((n, 2))
    c[:, 0] = cfg.friction * cfg.gravity - a_n**2 / eta2 - X[:, A] ** 2
    c[:, 1] = v * cfg.max_curvature - v * k - yaw_rate
    J = np.zeros((n, 2, nx))
    dc_dan = -2.0 * a_n / eta2
    J[:, 0, V] = dc_dan * (2.0 * v * k + yaw_rate)
    J[:, 0, PSI] = dc_dan * (-params.tau_psi * v)
    J[:, 0, PSID] = dc_dan * (params.tau_psi * v)
    J[:, 0, S] = dc_dan * (v**2 * dk)
    J[:, 0, A] = -2.0 * X[:, A]
    J[:, 1, V] = cfg.max_curvature - k
    J[:, 1, PSI] = params.tau_psi
    J[:, 1, PSID] = -params.tau_psi
    J[:, 1, S] = -v * dk
    return c, J


def friction_and_turning_constraints(x, kappa, cfg, params: EgoParams = EgoParams()):
    """Residuals (friction, turning) for one state; both >= 0 when satisfied."""
    c, _ = vehicle_limit_batch(np.atleast_2d(np.asarray(x, float)), kappa, cfg, params)
    return c[0]


def terminal_lateral_bounds(x, cfg, y_min, y_max):
    """Road bounds on y_e at the last stage, tightened by the minimum turning radius."""
    margin = x[V] ** 2 / cfg.max_normal_accel * (1.0 - abs(np.cos(x[PSI])))
    return y_min + margin, y_max - margin


def terminal_lateral_residuals(x, cfg, y_min, y_max):
    nx = len(x)
    r = x[V] ** 2 / cfg.max_normal_accel
    cpsi = np.cos(x[PSI])
    m = r * (1.0 - abs(cpsi))
    c = np.array([x[Y] - y_min - m, y_max - m - x[Y]])
    dm = np.zeros(nx)
    dm[V] = 2.0 * x[V] / cfg.max_normal_accel * (1.0 - abs(cpsi))
    dm[PSI] = r * np.sign(cpsi) * np.sin(x[PSI])
    J = np.zeros((2, nx))
    J[0] = -dm
    J[0, Y] += 1.0
    J[1] = -dm
    J[1, Y] -= 1.0
    return c, J


def brake_safety_margin(s_i, v_i, decel_i, s_j, v_j, decel_j):
    """Extra longitudinal distance so both vehicles can stop without contact."""
    s_i, v_i, s_j, v_j = map(np.asarray, (s_i, v_i, s_j, v_j))
    active = (s_i - s_j) * (v_i - v_j) < 0
    value = 0.5 * (v_i**2 / decel_i - v_j**2 / decel_j)
    out = np.where(active, np.maximum(value, 0.0), 0.0)
    return float(out) if out.ndim == 0 else out


def _brake_margin_grad(s_i, v_i, decel_i, s_j, v_j, decel_j):
    active = (s_i - s_j) * (v_i - v_j) < 0
    value = 0.5 * (v_i**2 / decel_i - v_j**2 / decel_j)
    on = active & (value > 0)
    return np.where(on, value, 0.0), np.where(on, v_i / decel_i, 0.0)


def hyperellipse_axes(psi_i, dims_i, dims_j, dy_min, ds_min):
    """Half lateral axis gamma and half longitudinal axis lambda of the keep-out set."""
    g, lam, _, _ = _axes_with_grad(np.asarray(psi_i, float), dims_i, dims_j, dy_min, ds_min)
    if np.ndim(g) == 0:
        return float(g), float(lam)
    return g, lam


def _axes_with_grad(psi, dims_i, dims_j, dy_min, ds_min, branch=None):
    # ``branch`` (+1/-1) replaces |sin psi| by a signed sin so each side of the kink is smooth
    L_i, b_i = dims_i
    L_j, b_j = dims_j
    sn, cs = np.sin(psi), np.cos(psi)
    sgn = np.sign(sn) if branch is None else np.full_like(sn, float(branch))
    gamma = 0.5 * L_i * sgn * sn + 0.5 * b_i * cs + 0.5 * b_j + dy_min
    dgamma = 0.5 * L_i * sgn * cs - 0.5 * b_i * sn
    num = 0.5 * L_i * cs + 0.5 * b_i * sgn * sn + 0.5 * L_j + ds_min
    dnum = -0.5 * L_i * sn + 0.5 * b_i * sgn * cs
    q = (gamma - dy_min) / gamma
    dq = dy_min * dgamma / gamma**2
    base = 1.0 - q**4
    den = base**0.25
    dden = -q**3 * dq * base ** (-0.75)
    lam = num / den
    dlam = dnum / den - num * dden / den**2
    return gamma, lam, dgamma, dlam


def lateral_terminal_margin(v_y_i, v_y_j, a_y_j, a_y_max_i, sign_geometry, big_margin,
                            deadband=0.0):
    """Addend to the lateral half-axis at the last horizon stage.

    Lateral speeds and accelerations are taken along the direction pointing
    from the neighbour towards the ego (``sign_geometry``), which leaves the
    textbook case (ego on the positive side) unchanged and mirrors the other.
    """
    add, _ = _lateral_margin_with_grad(v_y_i, v_y_j, a_y_j, a_y_max_i, sign_geometry,
                                       big_margin, deadband)
    return float(add) if np.ndim(add) == 0 else add


def _lateral_margin_with_grad(v_y_i, v_y_j, a_y_j, a_y_max_i, sign_geometry, big_margin,
                              deadband=0.0):
    """Vectorized margin and its derivative with respect to the ego lateral speed."""
    v_y_i, v_y_j, a_y_j = (np.asarray(a, dtype=float) for a in (v_y_i, v_y_j, a_y_j))
    sigma = np.sign(np.asarray(sign_geometry, dtype=float))
    sj = np.where(np.abs(v_y_j) <= deadband, 0.0, np.sign(v_y_j))
    active = (sj == sigma) & (sigma != 0)
    rel_v = sigma * (v_y_i - v_y_j)
    rel_a = a_y_max_i - sigma * a_y_j
    safe_a = np.where(rel_a == 0.0, 1.0, rel_a)
    closing = (rel_a != 0.0) & (rel_v / safe_a < 0)
    add = np.where(active, np.where(closing, rel_v**2 / (2.0 * safe_a), big_margin), 0.0)
    dadd = np.where(active & closing, sigma * rel_v / safe_a, 0.0)
    return add, dadd


def collision_constraint(dy, ds, gamma, lam, lam_b, beta, zeta):
    """Hyperellipse residual; >= 0 outside the keep-out region."""
    return (dy / gamma) ** 4 + (ds / (lam + lam_b + beta * zeta)) ** 4 - 1.0


def collision_batch(X, obs, stages, cfg, ego_dims, terminal_stage=None, branch=None):
    """Keep-out residuals of ego stages ``X`` against one obstacle at ``stages``.

    ``obs`` is an ObstacleTrajectory; ``stages`` are the horizon indices that
    the rows of ``X`` correspond to. Returns (g, dg/dx) with shapes (n,), (n, nx).
    The residual equals the smaller of its two ``branch`` versions, which the
    solver uses to linearize both sides of the kink at psi = 0.
    """
    g, J = collision_stack(X, ObstaclePack.from_list([obs]), stages, cfg, ego_dims,
                           terminal_stage, branch)
    return g[0], J[0]


@dataclass(frozen=True)
class ObstaclePack:
    """Neighbour predictions stacked along a leading obstacle axis."""

    s: np.ndarray        # (n_obs, N+1)
    y: np.ndarray
    v_s: np.ndarray
    v_y: np.ndarray
    a_y: np.ndarray
    length: np.ndarray   # (n_obs,)
    width: np.ndarray
    decel: np.ndarray

    @classmethod
    def from_list(cls, obstacles):
        obstacles = list(obstacles)
        if not obstacles:
            z = np.zeros((0, 0))
            return cls(z, z, z, z, z, np.zeros(0), np.zeros(0), np.zeros(0))
        stack = lambda k: np.array([np.asarray(getattr(o, k), float) for o in obstacles])
        return cls(stack("s"), stack("y"), stack("v_s"), stack("v_y"), stack("a_y"),
                   stack("length"), stack("width"), stack("decel"))

    def __len__(self):
        return len(self.length)


def collision_stack(X, pack: ObstaclePack, stages, cfg, ego_dims, terminal_stage=None,
                    branch=None):
    """``collision_batch`` for every obstacle at once: shapes (n_obs, n), (n_obs, n, nx)."""
    n, nx = X.shape
    stages = np.asarray(stages, dtype=int)
    n_o = len(pack)
    if n_o == 0:
        return np.zeros((0, n)), np.zeros((0, n, nx))
    s_j = pack.s[:, stages]
    y_j = pack.y[:, stages]
    vs_j = pack.v_s[:, stages]
    psi = X[:, PSI]
    v = X[:, V]
    sn, cs = np.sin(psi), np.cos(psi)
    vs_i = v * cs
    gamma, lam, dgamma, dlam = _axes_with_grad(
        psi[None, :], ego_dims, (pack.length[:, None], pack.width[:, None]),
        cfg.min_lateral_margin, cfg.min_longitudinal_margin, branch)
    gamma = np.broadcast_to(gamma, (n_o, n))
    dgamma = np.broadcast_to(dgamma, (n_o, n))
    lam_b, dlamb_dvs = _brake_margin_grad(X[None, :, S], vs_i[None, :], cfg.max_decel_cav,
                                          s_j, vs_j, pack.decel[:, None])
    dy = X[None, :, Y] - y_j
    ds = X[None, :, S] - s_j
    Gam = np.array(gamma)
    dGam_dpsi = np.array(dgamma)
    dGam_dv = np.zeros((n_o, n))
    if terminal_stage is not None:
        for r in np.nonzero(stages == terminal_stage)[0]:
            k = stages[r]
            vy_i = v[r] * sn[r]
            add, dadd = _lateral_margin_with_grad(
                vy_i, pack.v_y[:, k], pack.a_y[:, k], cfg.max_lateral_accel, np.sign(dy[:, r]),
                cfg.large_lateral_margin, cfg.lateral_speed_deadband)
            Gam[:, r] += add
            dGam_dpsi[:, r] += dadd * v[r] * cs[r]
            dGam_dv[:, r] += dadd * sn[r]
    D = lam + lam_b + cfg.comfort_headway * X[None, :, ZETA]
    g = (dy / Gam) ** 4 + (ds / D) ** 4 - 1.0
    dg_dGam = -4.0 * dy**4 / Gam**5
    dg_dD = -4.0 * ds**4 / D**5
    J = np.zeros((n_o, n, nx))
    J[:, :, Y] = 4.0 * dy**3 / Gam**4
    J[:, :, S] = 4.0 * ds**3 / D**4
    J[:, :, PSI] = dg_dGam * dGam_dpsi + dg_dD * (dlam + dlamb_dvs * (-v * sn))
    J[:, :, V] = dg_dGam * dGam_dv + dg_dD * dlamb_dvs * cs
    J[:, :, ZETA] = dg_dD * cfg.comfort_headway
    return g, J
