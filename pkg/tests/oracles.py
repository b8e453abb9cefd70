"""Independent reference computations used by the tests.

Each oracle takes a different route from the implementation it checks, so
agreement is evidence rather than a tautology.
"""
from __future__ import annotations

import numpy as np


def union_length(intervals) -> float:
    """Length of a union of intervals by a sorted endpoint sweep."""
    events = []
    for a, b in intervals:
        if b > a:
            events.append((a, 1))
            events.append((b, -1))
    events.sort(key=lambda e: (e[0], -e[1]))
    depth, total, last = 0, 0.0, None
    for x, kind in events:
        if depth > 0:
            total += x - last
        depth += kind
        last = x
    return total


def unique_length_oracle(ego, peers) -> float:
    """|union(ego, peers)| - |ego|: the length contributed by the peers alone."""
    return union_length([ego] + list(peers)) - union_length([ego])


def resample_plan(plan, delay, dt, anchor):
    """Evaluate a piecewise-linear plan at t_k + delay and translate stage 0 to ``anchor``.

    Past the last node the final segment is extended linearly.
    """
    plan = np.asarray(plan, float)
    n = len(plan)
    t_nodes = dt * np.arange(n)
    t_query = t_nodes + delay
    out = np.interp(t_query, t_nodes, plan)
    slope = (plan[-1] - plan[-2]) / dt
    beyond = t_query > t_nodes[-1]
    out[beyond] = plan[-1] + slope * (t_query[beyond] - t_nodes[-1])
    # interior shift uses the segment to the right; for the last node the backward one
    out[-1] = plan[-1] + delay * slope
    return out - out[0] + anchor


def min_safe_gap_by_simulation(v_rear, v_front, d_rear, d_front, dt=1e-4):
    """Smallest initial gap for which both vehicles braking at full rate never touch."""
    t_stop = max(v_rear / d_rear, v_front / d_front)
    t = np.arange(0.0, t_stop + dt, dt)
    x_r = np.where(t < v_rear / d_rear, v_rear * t - 0.5 * d_rear * t**2, v_rear**2 / (2 * d_rear))
    x_f = np.where(t < v_front / d_front, v_front * t - 0.5 * d_front * t**2,
                   v_front**2 / (2 * d_front))
    return float(max(0.0, np.max(x_r - x_f)))


def lq_speed_profile(v0, v_d, n, dt, tau_a, w_v, w_u, w_z=0.0):
    """Finite-horizon LQ tracking of the longitudinal chain (v, a) by dynamic programming.

    Discretizes v' = a, a' = tau_a (u - a) exactly (matrix exponential) and
    minimizes sum_k w_v (v_k - v_d)^2 + w_u u_k^2. Returns the speed sequence.
    """
    from scipy.linalg import expm

    Ac = np.array([[0.0, 1.0, 0.0], [0.0, -tau_a, 0.0], [0.0, 0.0, 0.0]])
    Bc = np.array([[0.0], [tau_a], [0.0]])
    M = np.zeros((4, 4))
    M[:3, :3] = Ac
    M[:3, 3:] = Bc
    E = expm(M * dt)
    Ad, Bd = E[:3, :3], E[:3, 3:]
    # state e = (v - v_d, a, 1); constant state lets the same recursion carry offsets
    Q = np.diag([w_v, 0.0, 0.0])
    R = np.array([[w_u]])
    P = Q.copy()
    Ks = []
    for _ in range(n):
        K = np.linalg.solve(R + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
        P = Q + Ad.T @ P @ (Ad - Bd @ K)
        Ks.append(K)
    Ks = Ks[::-1]
    x = np.array([v0 - v_d, 0.0, 1.0])
    vs = [v0]
    for K in Ks:
        u = -K @ x
        x = Ad @ x + (Bd @ u)
        vs.append(x[0] + v_d)
    return np.array(vs)
