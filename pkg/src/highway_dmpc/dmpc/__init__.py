from .config import OcpConfig
from .solver import (Infeasible, ManeuverPlan, ManeuverSolver, ObstacleTrajectory,
                     OcpProblem, lane_change_guess, shift_inputs)

__all__ = ["OcpConfig", "Infeasible", "ManeuverPlan", "ManeuverSolver",
           "ObstacleTrajectory", "OcpProblem", "lane_change_guess", "shift_inputs"]
