import numpy as np
import pytest

from highway_dmpc.hdv import (DriverParams, HdvConfig, LaneChangeState, LaneNeighbors, car_following_accel,
                              integrate_lateral, integrate_longitudinal, rbls_decision, safe_gap,
                              sample_driver, w99_accel)

P = DriverParams()
CFG = HdvConfig()
DT = 0.25


def test_free_flow():
    assert w99_accel(15.0, 0.0, None, 0.0, 0.0, P) > 0
    assert w99_accel(P.v_do, 0.0, None, 0.0, 0.0, P) == pytest.approx(0.0, abs=1e-12)


def test_standstill_equilibrium():
    assert w99_accel(0.0, 0.0, P.cc0, 0.0, 0.0, P) == 0.0
    assert car_following_accel(0.0, 0.0, P.cc0, 0.0, 0.0, P, DT) == 0.0


def simulate_platoon(lead_accel, v0, gap0, p=P, dt=DT):
    """Follower under the car-following law behind a leader with the given acceleration sequence."""
    s_l, v_l, s_f, v_f, a_f = gap0 + 5.0, v0, 0.0, v0, 0.0
    gaps, speeds = [], []
    for a_l in lead_accel:
        a_f = car_following_accel(v_f, a_f, s_l - s_f - 5.0, v_l, a_l, p, dt)
        s_l, v_l = integrate_longitudinal(s_l, v_l, a_l, dt)
        s_f, v_f = integrate_longitudinal(s_f, v_f, a_f, dt)
        gaps.append(s_l - s_f - 5.0)
        speeds.append(v_f)
    return np.array(gaps), np.array(speeds)


@pytest.mark.parametrize("v", [10.0, 20.0])
def test_following_equilibrium_gap(v):
    p = DriverParams(v_do=v + 5.0)
    gaps, speeds = simulate_platoon(np.zeros(int(400 / DT)), v, 60.0, p)
    settled = gaps[-int(100 / DT):]
    target = p.cc0 + p.cc1 * v
    # W99 oscillates inside its following band [target, target + cc2]
    assert target - 1.0 <= settled.mean() <= target + p.cc2 + 1.0
    assert speeds[-int(100 / DT):].mean() == pytest.approx(v, abs=0.1)


def test_randomized_braking_profiles_are_collision_free():
    rng = np.random.default_rng(11)
    n_steps = int(40 / DT)
    for _ in range(1000):
        v0 = rng.uniform(5, 30)
        gap0 = P.cc0 + P.cc1 * v0 * rng.uniform(0.8, 1.5)
        # piecewise-constant leader accelerations within the braking limit
        knots = rng.uniform(-CFG.max_decel, 2.0, 8)
        acc = np.repeat(knots, n_steps // 8)
        gaps, _ = simulate_platoon(acc, v0, gap0)
        assert gaps.min() >= 0.0


def stopping_gap_oracle(v_rear, v_front, b, tau, dt=1e-3):
    """Smallest gap for which the rear car (reacting after tau) stays behind the front car."""
    t = np.arange(0.0, tau + max(v_rear, v_front) / b + 1.0, dt)
    x_f = np.where(t < v_front / b, v_front * t - 0.5 * b * t**2, v_front**2 / (2 * b))
    tb = np.maximum(t - tau, 0.0)
    x_r = v_rear * np.minimum(t, tau) + np.where(tb < v_rear / b, v_rear * tb - 0.5 * b * tb**2,
                                                 v_rear**2 / (2 * b))
    return float(max(0.0, np.max(x_r - x_f)))


def test_safe_gap_dominates_stopping_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        vb, va = rng.uniform(0, 35, 2)
        need = stopping_gap_oracle(vb, va, CFG.max_decel, CFG.reaction_time)
        assert safe_gap(vb, va, CFG, 0.0) >= need - 1e-2
        if vb >= va:
            assert safe_gap(vb, va, CFG, 0.0) == pytest.approx(need, abs=2e-2)


def test_rbls_examples():
    empty = {l: LaneNeighbors() for l in (1, 2, 3)}
    assert rbls_decision(2, 3, 24.0, empty, P) == 0
    slow = dict(empty)
    slow[2] = LaneNeighbors(lead=(40.0, 15.0))
    assert rbls_decision(2, 3, 20.0, slow, P) in (-1, 1)
    only_left = {1: LaneNeighbors(lead=(30.0, 10.0)), 2: LaneNeighbors(lead=(40.0, 15.0)),
                 3: LaneNeighbors()}
    assert rbls_decision(2, 3, 20.0, only_left, P) == 1
    assert rbls_decision(2, 3, 20.0, only_left, P, s=10.0, no_change_zone=30.0) == 0


def test_rbls_rejects_short_rear_gap():
    v, v_rear = 20.0, 28.0
    need = P.cc0 + stopping_gap_oracle(v_rear, v, CFG.max_decel, CFG.reaction_time)
    for rear_gap, expect in ((0.9 * need, 0), (1.2 * need, 1)):
        nb = {1: LaneNeighbors(lead=(30.0, 10.0)), 2: LaneNeighbors(lead=(40.0, 15.0)), 3: LaneNeighbors(follow=(rear_gap, v_rear))}
        assert rbls_decision(2, 3, v, nb, P) == expect


def test_signal_precedes_move():
    st = LaneChangeState(target=2)
    assert st.step(10.0, 2, +1, CFG, moving=False) == 2 and st.signal == 1
    assert st.step(10.5, 2, +1, CFG, moving=False) == 3
    # cooldown: the next decision is ignored
    assert st.step(11.0, 3, +1, CFG, moving=False) == 3 and st.signal == 0


def test_lateral_tracking_settles():
    y, vy = 1.75, 0.0
    for _ in range(int(20 / DT)):
        y, vy = integrate_lateral(y, vy, 5.25, DT, CFG)
    assert y == pytest.approx(5.25, abs=1e-2)


def test_sample_driver():
    a = [sample_driver(np.random.default_rng(3)) for _ in range(2)]
    assert a[0] == a[1]
    rng = np.random.default_rng(0)
    draws = [sample_driver(rng) for _ in range(10_000)]
    v = np.array([d.v_do for d in draws])
    cc1 = np.array([d.cc1 for d in draws])
    assert all(d.cc0 == 3.04 for d in draws)
    assert abs(v.mean() - 24.2) <= 0.01 * 24.2
    assert v.min() >= 21.0 and v.max() <= 28.0
    assert abs(cc1.mean() - 1.45) < 0.01 and cc1.min() >= 1.15 and cc1.max() <= 1.75
