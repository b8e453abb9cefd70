import numpy as np
import pytest
from hypothesis import given, strategies as st

from highway_dmpc.road import (REFERENCE_LINK, InvalidLaneError, OffRoadError, RoadLink, lane_center,
                               lane_of, lane_of_clipped)


def test_lane_center_reference_network():
    assert lane_center(REFERENCE_LINK, 1) == 0.0
    assert lane_center(REFERENCE_LINK, 2) == 3.5
    with pytest.raises(InvalidLaneError):
        lane_center(REFERENCE_LINK, 4)
    with pytest.raises(InvalidLaneError):
        lane_center(REFERENCE_LINK, 0)


def test_reference_link_geometry():
    assert REFERENCE_LINK.length == 5000.0
    assert REFERENCE_LINK.lane_count == 3
    assert REFERENCE_LINK.y_min == -1.75
    assert REFERENCE_LINK.y_max == 2 * 3.5 + 1.75
    assert np.all(REFERENCE_LINK.curvature(np.linspace(0, 5000, 11)) == 0.0)
    assert np.all(np.diff(REFERENCE_LINK.lane_centers) == 3.5)


def test_lane_of_examples():
    assert lane_of(REFERENCE_LINK, 0.1) == 1
    assert lane_of(REFERENCE_LINK, 1.75) == 1
    assert lane_of(REFERENCE_LINK, 6.0) == 3
    assert lane_of(REFERENCE_LINK, 5.25) == 2
    with pytest.raises(OffRoadError):
        lane_of(REFERENCE_LINK, 9.0)
    with pytest.raises(OffRoadError):
        lane_of(REFERENCE_LINK, -2.0)
    assert lane_of_clipped(REFERENCE_LINK, 9.0) == 3


@given(st.integers(1, 6), st.floats(2.5, 5.0))
def test_lane_round_trip(n, w):
    link = RoadLink(lane_count=n, lane_width=w)
    for lane in range(1, n + 1):
        assert lane_of(link, lane_center(link, lane)) == lane


def test_curvature_table_interpolates():
    link = RoadLink(length=1000.0, curvature_s=(0.0, 500.0, 1000.0), curvature_k=(0.0, 0.001, 0.0))
    assert link.curvature(250.0) == pytest.approx(0.0005)
    assert link.curvature_slope(250.0) == pytest.approx(0.001 / 500.0)
    assert link.curvature_slope(750.0) == pytest.approx(-0.001 / 500.0)


def test_unreachable_singularity_enforced():
    with pytest.raises(ValueError):
        RoadLink(curvature_s=(0.0, 100.0), curvature_k=(0.2, 0.2))


@pytest.mark.parametrize("kw", [dict(lane_count=0), dict(lane_width=0.0), dict(length=-1.0)])
def test_invalid_links(kw):
    with pytest.raises(ValueError):
        RoadLink(**kw)
