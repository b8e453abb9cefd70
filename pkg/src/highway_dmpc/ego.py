"""Augmented ego-vehicle dynamics in the Frenet frame and RK4 discretization.

States are plain numpy vectors laid out as::

    [s, y_e, v_t, psi, a_t, psi_d, zeta, d_1, ..., d_{N_l-1}]

and inputs as ``[a_d, dpsi_d, u_zeta, u_d1, ..., u_d{N_l-1}]``. The last lane
decision variable is never stored; it is ``1 - sum(d)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

S, Y, V, PSI, A, PSID, ZETA, D0 = range(8)
AD, DPSI, UZETA, UD0 = range(4)

SINGULAR_TOL = 1e-9


class SingularityError(ArithmeticError):
    """Raised when 1 - y_e * kappa vanishes."""


@dataclass(frozen=True)
class EgoParams:
    tau_a: float = 2.0
    tau_psi: float = 2.0


def state_dim(n_lanes: int) -> int:
    return 7 + n_lanes - 1


def input_dim(n_lanes: int) -> int:
    return 3 + n_lanes - 1


@dataclass
class EgoState:
    s: float = 0.0
    y_e: float = 0.0
    v_t: float = 0.0
    psi: float = 0.0
    a_t: float = 0.0
    psi_d: float = 0.0
    zeta: float = 0.0
    d: tuple = (1.0, 0.0)

    def to_array(self) -> np.ndarray:
        return np.array([self.s, self.y_e, self.v_t, self.psi, self.a_t,
                         self.psi_d, self.zeta, *self.d], dtype=float)

    @classmethod
    def from_array(cls, x) -> "EgoState":
        x = np.asarray(x, dtype=float)
        return cls(*map(float, x[:7]), d=tuple(float(v) for v in x[7:]))

    @property
    def lane_weights(self) -> np.ndarray:
        d = np.asarray(self.d, dtype=float)
        return np.append(d, 1.0 - d.sum())


def lane_weights(x: np.ndarray) -> np.ndarray:
    """Full lane-decision vector (..., N_l) including the eliminated last entry."""
    d = x[..., D0:]
    return np.concatenate([d, 1.0 - d.sum(axis=-1, keepdims=True)], axis=-1)


def one_hot_lanes(lane: int, n_lanes: int) -> np.ndarray:
    """Stored decision variables (N_l - 1 of them) selecting ``lane`` (1-based)."""
    d = np.zeros(n_lanes - 1)
    if lane < n_lanes:
        d[lane - 1] = 1.0
    return d


def _curvature(road, s):
    if road is None:
        return np.zeros_like(s), np.zeros_like(s)
    if np.isscalar(road) or isinstance(road, (float, int)):
        return np.full_like(s, float(road)), np.zeros_like(s)
    if not road.curvature_s:
        z = np.zeros(np.shape(s))
        return z, z
    return road.curvature(s), road.curvature_slope(s)


def derivative(x, u, kappa=0.0, params: EgoParams = EgoParams()) -> np.ndarray:
    """Right-hand side of the augmented ODE for a single state.

    ``kappa`` is either a constant curvature or a ``RoadLink``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return batch_derivative(x[None], u[None], kappa, params)[0]


def batch_derivative(X, U, road=None, params: EgoParams = EgoParams()) -> np.ndarray:
    k, _ = _curvature(road, X[:, S])
    den = 1.0 - X[:, Y] * k
    if np.any(np.abs(den) < SINGULAR_TOL):
        raise SingularityError("1 - y_e*kappa is singular")
    dx = np.empty_like(X)
    c, sn = np.cos(X[:, PSI]), np.sin(X[:, PSI])
    dx[:, S] = X[:, V] * c / den
    dx[:, Y] = X[:, V] * sn
    dx[:, V] = X[:, A]
    dx[:, PSI] = params.tau_psi * (X[:, PSID] - X[:, PSI])
    dx[:, A] = params.tau_a * (U[:, AD] - X[:, A])
    dx[:, PSID] = U[:, DPSI]
    dx[:, ZETA] = U[:, UZETA]
    dx[:, D0:] = U[:, UD0:]
    return dx


def batch_derivative_jac(X, U, road=None, params: EgoParams = EgoParams()):
    """Return (f, df/dx, df/du) for a batch of states, shapes (n,nx), (n,nx,nx), (n,nx,nu)."""
    n, nx = X.shape
    nu = U.shape[1]
    f = batch_derivative(X, U, road, params)
    k, dk = _curvature(road, X[:, S])
    den = 1.0 - X[:, Y] * k
    c, sn = np.cos(X[:, PSI]), np.sin(X[:, PSI])
    v, y = X[:, V], X[:, Y]
    fx = np.zeros((n, nx, nx))
    fu = np.zeros((n, nx, nu))
    fx[:, S, S] = v * c * y * dk / den**2
    fx[:, S, Y] = v * c * k / den**2
    fx[:, S, V] = c / den
    fx[:, S, PSI] = -v * sn / den
    fx[:, Y, V] = sn
    fx[:, Y, PSI] = v * c
    fx[:, V, A] = 1.0
    fx[:, PSI, PSI] = -params.tau_psi
    fx[:, PSI, PSID] = params.tau_psi
    fx[:, A, A] = -params.tau_a
    fu[:, A, AD] = params.tau_a
    fu[:, PSID, DPSI] = 1.0
    fu[:, ZETA, UZETA] = 1.0
    for i in range(nx - D0):
        fu[:, D0 + i, UD0 + i] = 1.0
    return f, fx, fu


def rk4_step(x, u, dt: float, road=None, params: EgoParams = EgoParams()) -> np.ndarray:
    """One classical RK4 step with the input held over the interval."""
    x = np.asarray(x, dtype=float)
    if dt == 0.0:
        return x.copy()
    return rk4_batch(x[None], np.asarray(u, dtype=float)[None], dt, road, params)[0]


def rk4_batch(X, U, dt, road=None, params: EgoParams = EgoParams()) -> np.ndarray:
    k1 = batch_derivative(X, U, road, params)
    k2 = batch_derivative(X + 0.5 * dt * k1, U, road, params)
    k3 = batch_derivative(X + 0.5 * dt * k2, U, road, params)
    k4 = batch_derivative(X + dt * k3, U, road, params)
    return X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_batch_jac(X, U, dt, road=None, params: EgoParams = EgoParams()):
    """RK4 step for a batch plus its exact Jacobians w.r.t. state and input."""
    nx = X.shape[1]
    eye = np.eye(nx)
    k1, a1, b1 = batch_derivative_jac(X, U, road, params)
    k2, a2, b2 = batch_derivative_jac(X + 0.5 * dt * k1, U, road, params)
    dk2x = a2 @ (eye + 0.5 * dt * a1)
    dk2u = a2 @ (0.5 * dt * b1) + b2
    k3, a3, b3 = batch_derivative_jac(X + 0.5 * dt * k2, U, road, params)
    dk3x = a3 @ (eye + 0.5 * dt * dk2x)
    dk3u = a3 @ (0.5 * dt * dk2u) + b3
    k4, a4, b4 = batch_derivative_jac(X + dt * k3, U, road, params)
    dk4x = a4 @ (eye + dt * dk3x)
    dk4u = a4 @ (dt * dk3u) + b4
    xn = X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    jx = eye + dt / 6.0 * (a1 + 2 * dk2x + 2 * dk3x + dk4x)
    ju = dt / 6.0 * (b1 + 2 * dk2u + 2 * dk3u + dk4u)
    return xn, jx, ju


def rollout(x0, inputs, dt, road=None, params: EgoParams = EgoParams()) -> np.ndarray:
    """Forward-simulate a sequence of held inputs; returns (len(inputs)+1, nx)."""
    U = np.asarray(inputs, dtype=float)
    X = np.empty((len(U) + 1, len(x0)))
    X[0] = x0
    for k in range(len(U)):
        X[k + 1] = rk4_batch(X[k:k + 1], U[k:k + 1], dt, road, params)[0]
    return X


def clamp_plant_state(x: np.ndarray, v_max: float) -> np.ndarray:
    """Project onto the state invariant boxes (plant level only)."""
    x = x.copy()
    x[V] = min(max(x[V], 0.0), v_max)
    x[ZETA] = min(max(x[ZETA], 0.0), v_max)
    d = np.clip(x[D0:], 0.0, 1.0)
    total = d.sum()
    if total > 1.0:
        d = d / total
    x[D0:] = d
    return x
