import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from highway_dmpc.dmpc import OcpConfig, ObstacleTrajectory, terms
from highway_dmpc.ego import A, D0, PSI, PSID, S, V, Y, ZETA, EgoParams
from highway_dmpc.road import RoadLink

from oracles import min_safe_gap_by_simulation

CFG = OcpConfig()
CENTERS = np.array([0.0, 3.5, 7.0])


def state(s=0.0, y=0.0, v=0.0, psi=0.0, a=0.0, psi_d=0.0, zeta=0.0, d=(1.0, 0.0)):
    return np.array([s, y, v, psi, a, psi_d, zeta, *d], dtype=float)


# ------------------------------------------------------------------ costs
def test_lane_dependent_perfect_tracking():
    F = terms.lane_dependent_cost(state(y=0.0, v=20.0), CENTERS, [20.0, 25.0, 30.0])
    assert np.all(F == 0.0)


def test_lane_dependent_single_offset():
    F = terms.lane_dependent_cost(state(y=1.0, v=20.0), CENTERS, [20.0, 25.0, 30.0])
    assert np.count_nonzero(F) == 1 and F[0] == 1.0


def test_lane_dependent_split_decision():
    v1, v2 = 20.0, 25.0
    F = terms.lane_dependent_cost(state(y=0.0, v=v2, d=(0.5, 0.5)), CENTERS, [v1, v2, 30.0])
    assert F == pytest.approx([0.0, 0.5 * (0.0 - 3.5), 0.0, 0.5 * (v2 - v1), 0.0, 0.0])


def test_lane_independent_examples():
    assert terms.lane_independent_cost(state(v=22.0, zeta=22.0), 22.0) == pytest.approx([0, 0, 0])
    G = terms.lane_independent_cost(state(d=(1 / 3, 1 / 3)), 0.0)
    assert G[2] == pytest.approx(2.0 / 3.0)
    G = terms.lane_independent_cost(state(d=(0.5, 0.5)), 0.0)
    assert G[2] == pytest.approx(0.5)


def test_predictability_examples():
    assert terms.predictability_cost(state(s=10.0, y=1.0), [10.0, 1.0]) == pytest.approx([0, 0])
    assert terms.predictability_cost(state(s=12.0, y=1.0), [10.0, 1.0]) == pytest.approx([2, 0])
    assert terms.predictability_cost(state(s=99.0, y=4.0), None) == pytest.approx([0, 0])


# ----------------------------------------------------------- constraints
def test_friction_slack_on_straight_cruise():
    c = terms.friction_and_turning_constraints(state(v=20.0), 0.0, CFG)
    assert np.all(c > 0)


def test_friction_active_boundary():
    a = np.sqrt(CFG.friction * CFG.gravity)
    c = terms.friction_and_turning_constraints(state(v=20.0, a=a), 0.0, CFG)
    assert c[0] == pytest.approx(0.0, abs=1e-12)


def test_friction_with_yaw_rate():
    # yaw rate 0.05 = tau_psi * (psi_d - psi) with tau_psi = 2
    p = EgoParams(tau_psi=2.0)
    budget = CFG.friction * CFG.gravity - 0.25
    ok = terms.friction_and_turning_constraints(state(v=20.0, psi_d=0.025, a=np.sqrt(budget) - 1e-6), 0.0, CFG, p)
    bad = terms.friction_and_turning_constraints(state(v=20.0, psi_d=0.025, a=np.sqrt(budget) + 1e-6), 0.0, CFG, p)
    assert ok[0] >= 0 > bad[0]


def test_terminal_lateral_bounds():
    road = RoadLink()
    assert terms.terminal_lateral_bounds(state(v=20.0), CFG, road.y_min, road.y_max) == (road.y_min, road.y_max)
    assert terms.terminal_lateral_bounds(state(v=0.0, psi=0.1), CFG, road.y_min, road.y_max) == (road.y_min, road.y_max)
    lo, hi = terms.terminal_lateral_bounds(state(v=20.0, psi=0.1), CFG, road.y_min, road.y_max)
    assert lo - road.y_min == pytest.approx(100.0 * (1 - np.cos(0.1)))
    assert lo - road.y_min == pytest.approx(0.4996, abs=1e-4)
    assert road.y_max - hi == pytest.approx(lo - road.y_min)


def test_brake_margin_examples():
    assert terms.brake_safety_margin(10.0, 30.0, 6.0, 0.0, 20.0, 6.0) == 0.0
    assert terms.brake_safety_margin(-50.0, 20.0, 6.0, 0.0, 20.0, 6.0) == 0.0
    assert terms.brake_safety_margin(-50.0, 30.0, 6.0, 0.0, 20.0, 6.0) == pytest.approx(41.6667, abs=1e-4)
    assert min_safe_gap_by_simulation(30.0, 20.0, 6.0, 6.0) == pytest.approx(41.6667, abs=1e-2)


@given(st.floats(0.5, 40), st.floats(0, 40), st.floats(3, 9), st.floats(3, 9))
@settings(max_examples=40, deadline=None)
def test_brake_margin_matches_stopping_simulation(v_rear, v_front, d_rear, d_front):
    """The margin is the minimum gap for which braking rear/front vehicles never touch,
    whenever the rear vehicle is closing in and also needs the longer stop."""
    lam = terms.brake_safety_margin(-1.0, v_rear, d_rear, 0.0, v_front, d_front)
    if v_rear <= v_front:
        assert lam == 0.0
        return
    need = min_safe_gap_by_simulation(v_rear, v_front, d_rear, d_front)
    # the stop-distance difference is what the margin encodes; the simulated
    # worst gap can only be larger when the front stops first
    assert lam <= need + 1e-3
    stop_r, stop_f = v_rear / d_rear, v_front / d_front
    if stop_r >= stop_f and d_rear <= d_front:
        assert lam == pytest.approx(need, abs=5e-3)


def test_hyperellipse_axes_examples():
    g, lam = terms.hyperellipse_axes(0.0, (5.0, 2.0), (5.0, 2.0), 0.25, 1.0)
    assert g == pytest.approx(2.25)
    assert lam == pytest.approx(6.0 / (1 - (2.0 / 2.25) ** 4) ** 0.25)
    assert lam == pytest.approx(7.66, abs=0.01)
    g, _ = terms.hyperellipse_axes(np.pi / 2, (5.0, 2.0), (5.0, 2.0), 0.25, 1.0)
    assert g == pytest.approx(3.75)


def test_hyperellipse_contains_corner_point():
    """The point (delta s, gamma - dy_min) of the bounding boxes lies on the level set g = 1."""
    g, lam = terms.hyperellipse_axes(0.0, (5.0, 2.0), (5.0, 2.0), 0.25, 1.0)
    pt = (6.0, g - 0.25)
    assert (pt[1] / g) ** 4 + (pt[0] / lam) ** 4 == pytest.approx(1.0)


def test_lateral_terminal_margin_examples():
    # neighbour moving away from ego (ego above, neighbour moving down)
    assert terms.lateral_terminal_margin(0.0, -0.5, 0.0, 2.0, +1.0, 100.0) == 0.0
    # equal lateral speeds: t_c = 0 -> M
    assert terms.lateral_terminal_margin(0.5, 0.5, 0.0, 2.0, +1.0, 100.0) == 100.0
    # neighbour below ego moving up towards it at 0.5 m/s
    assert terms.lateral_terminal_margin(0.0, 0.5, 0.0, 2.0, +1.0, 100.0) == pytest.approx(0.0625)
    # mirrored geometry gives the same value
    assert terms.lateral_terminal_margin(0.0, -0.5, 0.0, 2.0, -1.0, 100.0) == pytest.approx(0.0625)
    # zero relative acceleration bound: treated as t_c >= 0
    assert terms.lateral_terminal_margin(0.0, 0.5, 2.0, 2.0, +1.0, 100.0) == 100.0


def test_collision_constraint_examples():
    g, lam = 2.25, 7.66
    assert terms.collision_constraint(g, 0.0, g, lam, 0.0, 1.0, 0.0) == pytest.approx(0.0)
    assert terms.collision_constraint(2 * g, 0.0, g, lam, 0.0, 1.0, 0.0) == pytest.approx(15.0)
    assert terms.collision_constraint(0.0, lam + 3.0 + 1.0 * 4.0, g, lam, 3.0, 1.0, 4.0) == pytest.approx(0.0)


# --------------------------------------------------- Jacobians vs FD
def _random_state(rng, nl=3):
    x = np.array([rng.uniform(0, 900), rng.uniform(-1.5, 8.5), rng.uniform(2, 32),
                  rng.uniform(-0.15, 0.15), rng.uniform(-3, 2), rng.uniform(-0.15, 0.15),
                  rng.uniform(0, 25)])
    return np.r_[x, rng.dirichlet(np.ones(nl))[:-1]]


def _fd(fun, x, h=1e-6):
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _rel_err(J, Jfd):
    scale = np.maximum(np.abs(Jfd), 1.0)
    return float(np.max(np.abs(J - Jfd) / scale))


def jacobian_errors(n_points=100, seed=0):
    """Worst relative Jacobian error of every cost output and constraint residual."""
    rng = np.random.default_rng(seed)
    road = RoadLink(length=1000.0, curvature_s=(0.0, 1000.0), curvature_k=(0.0, 0.002))
    params = EgoParams()
    worst = {}

    def track(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(n_points):
        x = _random_state(rng)
        refs = rng.uniform(15, 30, (1, 3))
        f = lambda z: terms.lane_dependent_batch(z[None], CENTERS, refs)[0][0]
        track("lane_dependent", _rel_err(terms.lane_dependent_batch(x[None], CENTERS, refs)[1][0], _fd(f, x)))
        v_d = rng.uniform(15, 30)
        f = lambda z: terms.lane_independent_batch(z[None], v_d)[0][0]
        track("lane_independent", _rel_err(terms.lane_independent_batch(x[None], v_d)[1][0], _fd(f, x)))
        prior = x[[S, Y]][None] + rng.normal(0, 2, (1, 2))
        f = lambda z: terms.predictability_batch(z[None], prior)[0][0]
        track("predictability", _rel_err(terms.predictability_batch(x[None], prior)[1][0], _fd(f, x)))
        f = lambda z: terms.vehicle_limit_batch(z[None], road, CFG, params)[0][0]
        track("vehicle_limits", _rel_err(terms.vehicle_limit_batch(x[None], road, CFG, params)[1][0], _fd(f, x)))
        f = lambda z: terms.terminal_lateral_residuals(z, CFG, road.y_min, road.y_max)[0]
        track("terminal_lateral", _rel_err(terms.terminal_lateral_residuals(x, CFG, road.y_min, road.y_max)[1], _fd(f, x)))
        # obstacle placed so the residual is moderate (not astronomically large)
        n = CFG.horizon_steps + 1
        obs = ObstacleTrajectory(
            s=x[S] + rng.uniform(-25, 25) + np.zeros(n), y=x[Y] + rng.uniform(-4, 4) + np.zeros(n),
            v_s=rng.uniform(5, 30) + np.zeros(n), v_y=rng.uniform(-1, 1) + np.zeros(n),
            a_y=rng.uniform(-1, 1) + np.zeros(n), length=rng.uniform(4, 6), width=rng.uniform(1.6, 2.4),
            decel=rng.uniform(4, 8))
        x_c = x.copy()
        if abs(np.sin(x_c[PSI])) < 1e-4:
            x_c[PSI] = 1e-3   # stay off the |sin psi| kink where no derivative exists
        for stage in (3, n - 1):
            f = lambda z: terms.collision_batch(z[None], obs, np.array([stage]), CFG, (5.0, 2.0), n - 1)[0]
            g, J = terms.collision_batch(x_c[None], obs, np.array([stage]), CFG, (5.0, 2.0), n - 1)
            track("collision", _rel_err(J[0] / max(1.0, abs(g[0])), _fd(f, x_c, 1e-7)[0] / max(1.0, abs(g[0]))))
            for branch in (1.0, -1.0):
                f = lambda z: terms.collision_batch(z[None], obs, np.array([stage]), CFG, (5.0, 2.0), n - 1, branch)[0]
                g, J = terms.collision_batch(x[None], obs, np.array([stage]), CFG, (5.0, 2.0), n - 1, branch)
                track("collision_branch", _rel_err(J[0] / max(1.0, abs(g[0])), _fd(f, x, 1e-7)[0] / max(1.0, abs(g[0]))))
    return worst


def test_jacobians_match_finite_differences():
    worst = jacobian_errors(100)
    assert max(worst.values()) <= 1e-5, worst


def test_collision_residual_is_min_of_branches():
    rng = np.random.default_rng(3)
    n = CFG.horizon_steps + 1
    obs = ObstacleTrajectory.constant_velocity(20.0, 3.0, 20.0, n, 0.5)
    for _ in range(50):
        x = _random_state(rng)
        x[S], x[Y] = 10.0, 1.0
        g = terms.collision_batch(x[None], obs, np.array([2]), CFG, (5.0, 2.0))[0][0]
        gp = terms.collision_batch(x[None], obs, np.array([2]), CFG, (5.0, 2.0), branch=1.0)[0][0]
        gm = terms.collision_batch(x[None], obs, np.array([2]), CFG, (5.0, 2.0), branch=-1.0)[0][0]
        assert g == pytest.approx(min(gp, gm), rel=1e-12, abs=1e-12)


def test_stacked_collision_equals_per_obstacle():
    rng = np.random.default_rng(5)
    n = CFG.horizon_steps + 1
    obstacles = [ObstacleTrajectory(rng.uniform(0, 60, n), rng.uniform(0, 7, n), rng.uniform(10, 30, n),
                                    rng.uniform(-1, 1, n), rng.uniform(-1, 1, n),
                                    length=rng.uniform(4, 6), width=2.0, decel=rng.uniform(4, 8))
                 for _ in range(4)]
    X = np.array([_random_state(rng) for _ in range(n - 1)])
    stages = np.arange(1, n)
    g, J = terms.collision_stack(X, terms.ObstaclePack.from_list(obstacles), stages, CFG, (5.0, 2.0), n - 1)
    for k, o in enumerate(obstacles):
        g1, J1 = terms.collision_batch(X, o, stages, CFG, (5.0, 2.0), n - 1)
        assert np.allclose(g[k], g1, rtol=1e-13) and np.allclose(J[k], J1, rtol=1e-13)
