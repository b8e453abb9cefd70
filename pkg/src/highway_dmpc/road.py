"""Road link geometry and lane bookkeeping in the path-aligned (Frenet) frame."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidLaneError(ValueError):
    pass


class OffRoadError(ValueError):
    pass


@dataclass(frozen=True)
class RoadLink:
    """A single straight-or-curved multi-lane link.

    Lane 1 is the rightmost lane and the lateral origin sits on its centerline.
    Curvature is a piecewise-linear table ``(curvature_s, curvature_k)``; an
    empty table means a straight road.
    """

    length: float = 5000.0
    lane_count: int = 3
    lane_width: float = 3.5
    speed_limit: float = 33.33
    no_lane_change_zone: float = 30.0
    curvature_s: tuple = ()
    curvature_k: tuple = ()

    def __post_init__(self):
        if self.lane_count < 1:
            raise ValueError("lane_count must be >= 1")
        if self.lane_width <= 0 or self.length <= 0:
            raise ValueError("lane_width and length must be positive")
        if len(self.curvature_s) != len(self.curvature_k):
            raise ValueError("curvature table columns differ in length")
        if self.curvature_k:
            kmax = max(abs(k) for k in self.curvature_k)
            reach = max(abs(self.y_min), abs(self.y_max))
            if kmax * reach >= 1.0:
                raise ValueError("curvature too large: |y_e * kappa| >= 1 is reachable")

    @property
    def lane_centers(self) -> np.ndarray:
        return self.lane_width * np.arange(self.lane_count, dtype=float)

    @property
    def y_min(self) -> float:
        return -0.5 * self.lane_width

    @property
    def y_max(self) -> float:
        return (self.lane_count - 0.5) * self.lane_width

    def curvature(self, s):
        if not self.curvature_s:
            return np.zeros_like(np.asarray(s, dtype=float))
        return np.interp(s, self.curvature_s, self.curvature_k)

    def curvature_slope(self, s):
        """d(kappa)/ds of the interpolated table (0 outside the table)."""
        s = np.asarray(s, dtype=float)
        if len(self.curvature_s) < 2:
            return np.zeros_like(s)
        xs = np.asarray(self.curvature_s, dtype=float)
        ks = np.asarray(self.curvature_k, dtype=float)
        slopes = np.diff(ks) / np.diff(xs)
        idx = np.clip(np.searchsorted(xs, s, side="right") - 1, 0, len(slopes) - 1)
        inside = (s >= xs[0]) & (s <= xs[-1])
        return np.where(inside, slopes[idx], 0.0)


def lane_center(link: RoadLink, lane: int) -> float:
    """Lateral offset of the centerline of ``lane`` (1-based)."""
    if not 1 <= lane <= link.lane_count:
        raise InvalidLaneError(f"lane {lane} outside 1..{link.lane_count}")
    return float(link.lane_width * (lane - 1))


def lane_of(link: RoadLink, y_e: float) -> int:
    """Index of the nearest lane centerline; midpoint ties go to the lower lane."""
    if y_e < link.y_min - 1e-9 or y_e > link.y_max + 1e-9:
        raise OffRoadError(f"y_e={y_e:.3f} outside [{link.y_min}, {link.y_max}]")
    # ceil(x - 0.5) rounds exact halves down
    lane = int(np.ceil(y_e / link.lane_width - 0.5)) + 1
    return min(max(lane, 1), link.lane_count)


def lane_of_clipped(link: RoadLink, y_e: float) -> int:
    """``lane_of`` that saturates instead of raising for slightly off-road positions."""
    return lane_of(link, min(max(y_e, link.y_min), link.y_max))


REFERENCE_LINK = RoadLink()
