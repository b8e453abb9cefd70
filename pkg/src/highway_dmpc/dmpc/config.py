"""Optimal-control problem parameters (horizon, weights, limits, solver knobs)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class OcpConfig:
    """Tuning of the per-vehicle maneuver planner.

    Weights are per-entry diagonals applied at every stage. Units follow SI;
    lateral quantities are in metres, angles in radians.
    """

    horizon_steps: int = 12
    horizon_dt: float = 0.5

    # lane-dependent output weights (lateral tracking, lane speed tracking)
    weight_lane_position: float = 1.0
    weight_lane_speed: float = 0.5
    # lane-independent outputs: desired speed, slack state, lane ambiguity
    weight_desired_speed: float = 0.5
    weight_slack: float = 0.1
    weight_lane_ambiguity: float = 2.0
    # predictability outputs: s and y_e deviation from the prior plan
    weight_prior_s: float = 0.05
    weight_prior_y: float = 0.5
    # inputs: a_d, dpsi_d, u_zeta, then each lane decision rate
    weight_accel: float = 0.5
    weight_heading_rate: float = 50.0
    weight_slack_rate: float = 0.1
    weight_lane_rate: float = 2.0

    friction: float = 0.9
    normalization: float = 2.0
    gravity: float = 9.81
    max_curvature: float = 0.2
    max_normal_accel: float = 4.0
    max_lateral_accel: float = 2.0
    comfort_headway: float = 1.0
    min_lateral_margin: float = 0.25
    min_longitudinal_margin: float = 1.0
    max_decel_cav: float = 6.0
    max_decel_hdv: float = 6.0
    large_lateral_margin: float = 100.0
    # lateral speeds below this are treated as zero in the terminal lateral margin sign test
    lateral_speed_deadband: float = 0.05

    accel_bounds: tuple = (-6.0, 2.5)
    heading_rate_bounds: tuple = (-0.2, 0.2)
    slack_rate_bounds: tuple = (-5.0, 5.0)
    lane_rate_bounds: tuple = (-1.0, 1.0)
    heading_command_bounds: tuple = (-0.15, 0.15)
    s_max: float | None = None     # optional stop line on s (None: unbounded)

    tol_viol: float = 1e-3
    max_iters: int = 30
    candidate_iters: int = 10     # SQP iterations for each extra initial guess
    # acceleration commands of the lane-holding restarts tried when no feasible plan was found
    recovery_accels: tuple = (-2.0, -5.0, 1.5)
    single_iteration: bool = False
    penalty_initial: float = 1e2
    penalty_max: float = 1e5
    penalty_growth: float = 10.0
    step_tol: float = 1e-7
    # collision rows whose residual exceeds this at the linearization point are left out of the QP
    collision_row_cutoff: float = 50.0
    qp_backend: str = "ipm"     # ipm (in-repo), clarabel or osqp

    def __post_init__(self):
        if self.horizon_steps < 2:
            raise ValueError("horizon_steps must be >= 2")
        if self.horizon_dt <= 0:
            raise ValueError("horizon_dt must be positive")
        if self.normalization <= 0:
            raise ValueError("normalization must be positive")
        for name, value in self.weights().items():
            if np.any(np.asarray(value) < 0):
                raise ValueError(f"weight {name} must be >= 0")
        self.accel_bounds = tuple(self.accel_bounds)
        self.heading_rate_bounds = tuple(self.heading_rate_bounds)
        self.slack_rate_bounds = tuple(self.slack_rate_bounds)
        self.lane_rate_bounds = tuple(self.lane_rate_bounds)
        self.heading_command_bounds = tuple(self.heading_command_bounds)
        self.recovery_accels = tuple(self.recovery_accels)

    def weights(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__ if k.startswith("weight_")}

    def lane_weights(self, n_lanes: int) -> np.ndarray:
        return np.r_[np.full(n_lanes, self.weight_lane_position),
                     np.full(n_lanes, self.weight_lane_speed)]

    def independent_weights(self) -> np.ndarray:
        return np.array([self.weight_desired_speed, self.weight_slack, self.weight_lane_ambiguity])

    def prior_weights(self) -> np.ndarray:
        return np.array([self.weight_prior_s, self.weight_prior_y])

    def input_weights(self, n_lanes: int) -> np.ndarray:
        return np.r_[self.weight_accel, self.weight_heading_rate, self.weight_slack_rate,
                     np.full(n_lanes - 1, self.weight_lane_rate)]

    def input_bounds(self, n_lanes: int):
        lo = [self.accel_bounds[0], self.heading_rate_bounds[0], self.slack_rate_bounds[0]]
        hi = [self.accel_bounds[1], self.heading_rate_bounds[1], self.slack_rate_bounds[1]]
        lo += [self.lane_rate_bounds[0]] * (n_lanes - 1)
        hi += [self.lane_rate_bounds[1]] * (n_lanes - 1)
        return np.array(lo), np.array(hi)

    def max_decel(self, is_cav: bool) -> float:
        return self.max_decel_cav if is_cav else self.max_decel_hdv
