import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtds.errors import EmptyNetwork, InvalidNetwork, OutOfRange, UnknownLane
from dtds.geo import (
    LocalPoint,
    RoadNetwork,
    geo_to_local,
    heading_of,
    heading_to_yaw,
    lane_point,
    local_to_geo,
    network_from_json,
    project_to_lane,
)
from dtds.model import GeoPosition

from support import random_network_doc, sample_lanes, sampled_nearest

ORIGIN = GeoPosition(38.25, 21.73)


def test_equator_longitude_step():
    # arc length of 0.001 degree on a 6378137 m sphere
    expected = 6378137.0 * math.pi / 180.0 * 0.001
    p = geo_to_local(GeoPosition(0.0, 0.0), GeoPosition(0.0, 0.001))
    assert p.x == pytest.approx(111.3194908, abs=1e-4)
    assert p.x == pytest.approx(expected, abs=1e-9)
    assert p.y == 0.0


def test_axes():
    east = geo_to_local(ORIGIN, GeoPosition(ORIGIN.lat, ORIGIN.lon + 0.01))
    north = geo_to_local(ORIGIN, GeoPosition(ORIGIN.lat + 0.01, ORIGIN.lon))
    assert east.x > 0 and east.y == 0
    assert north.y > 0 and north.x == 0
    # a degree of longitude shrinks with cos(latitude)
    assert east.x == pytest.approx(north.y * math.cos(math.radians(ORIGIN.lat)))


def test_altitude_passes_through():
    origin = GeoPosition(10, 10, 123.0)
    assert local_to_geo(origin, LocalPoint(5, 5)).alt == 123.0


def test_out_of_range():
    with pytest.raises(OutOfRange):
        geo_to_local(ORIGIN, GeoPosition(ORIGIN.lat + 1.5, ORIGIN.lon))
    with pytest.raises(OutOfRange):
        local_to_geo(ORIGIN, LocalPoint(2e5, 0))
    with pytest.raises(OutOfRange):
        local_to_geo(ORIGIN, LocalPoint(float("nan"), 0))


@settings(max_examples=500)
@given(
    st.floats(-70, 70),
    st.floats(-179, 179),
    st.floats(0, 10_000),
    st.floats(0, 2 * math.pi),
)
def test_round_trip_within_10km(lat, lon, dist, bearing):
    origin = GeoPosition(lat, lon)
    local = LocalPoint(dist * math.sin(bearing), dist * math.cos(bearing))
    back = geo_to_local(origin, local_to_geo(origin, local))
    assert math.hypot(back.x - local.x, back.y - local.y) < 1e-6
    p = local_to_geo(origin, local)
    again = local_to_geo(origin, geo_to_local(origin, p))
    assert abs(again.lat - p.lat) < 1e-6 and abs(again.lon - p.lon) < 1e-6


@pytest.mark.parametrize(
    "dx,dy,heading,yaw",
    [(0, 1, 0, 0), (1, 0, 90, 90), (0, -1, 180, -180), (-1, 0, 270, -90), (1, 1, 45, 45)],
)
def test_heading_and_yaw(dx, dy, heading, yaw):
    assert heading_of(dx, dy) == pytest.approx(heading)
    assert heading_to_yaw(heading_of(dx, dy)) == pytest.approx(yaw)


def straight():
    return network_from_json({
        "origin": {"lat": 0, "lon": 0},
        "lanes": [
            {"id": "b", "points": [[0, 0], [100, 0]], "speedLimit": 10},
            {"id": "a", "points": [[0, 10], [50, 10], [50, 60]], "speedLimit": 10},
        ],
        "connections": [{"from": "b", "to": "b"}],
    })


def test_projection_examples():
    net = straight()
    p = project_to_lane(net, LocalPoint(30, 2))
    assert p.lane_id == "b" and p.s == pytest.approx(30) and p.lateral == pytest.approx(2) and p.heading == pytest.approx(90)
    p = project_to_lane(net, LocalPoint(55, 30))
    assert p.lane_id == "a" and p.s == pytest.approx(70) and p.lateral == pytest.approx(5) and p.heading == pytest.approx(0)
    # equidistant from both lanes: lexicographically first lane wins
    assert project_to_lane(net, LocalPoint(20, 5)).lane_id == "a"
    # beyond the end clamps to the endpoint
    p = project_to_lane(net, LocalPoint(130, -4))
    assert p.s == pytest.approx(100) and p.lateral == pytest.approx(math.hypot(30, 4))
    assert net.is_loop("b") and not net.is_loop("a")


def test_lane_point():
    net = straight()
    point, heading = lane_point(net, "a", 75)
    assert point == pytest.approx((50, 35)) and heading == pytest.approx(0)
    with pytest.raises(OutOfRange):
        lane_point(net, "a", 200)
    with pytest.raises(UnknownLane):
        lane_point(net, "zz", 0)


def test_network_errors():
    with pytest.raises(EmptyNetwork):
        project_to_lane(RoadNetwork(ORIGIN, {}), LocalPoint(0, 0))
    bad = [
        {"origin": {"lat": 0}, "lanes": []},
        {"origin": {"lat": 0, "lon": 0}, "lanes": [{"id": "a", "points": [[0, 0]], "speedLimit": 1}]},
        {"origin": {"lat": 0, "lon": 0}, "lanes": [{"id": "a", "points": [[0, 0], [0, 0]], "speedLimit": 1}]},
        {"origin": {"lat": 0, "lon": 0}, "lanes": [{"id": "a", "points": [[0, 0], [1, 0]], "speedLimit": 0}]},
        {"origin": {"lat": 0, "lon": 0}, "lanes": [{"id": "a", "points": [[0, 0], [1, 0]], "speedLimit": 1}],
         "connections": [{"from": "a", "to": "b"}]},
    ]
    for doc in bad:
        with pytest.raises(InvalidNetwork):
            network_from_json(doc)


def test_network_json_round_trip():
    net = straight()
    again = network_from_json(net.to_json())
    assert again.lanes.keys() == net.lanes.keys() and again.connections == net.connections


def check_projection(net, samples, point):
    proj = project_to_lane(net, point)
    on_lane, _ = lane_point(net, proj.lane_id, proj.s)
    # the reported (lane, s) is where the reported distance is measured from
    assert math.hypot(on_lane.x - point.x, on_lane.y - point.y) == pytest.approx(proj.lateral, abs=1e-6)
    # and nothing sampled at 1 cm is closer by more than 2 cm
    assert abs(sampled_nearest(samples, point) - proj.lateral) < 0.02


def test_projection_matches_sampling_oracle():
    rng = random.Random(5)
    for _ in range(10):
        doc = random_network_doc(rng)
        net, samples = network_from_json(doc), sample_lanes(doc)
        for _ in range(5):
            check_projection(net, samples, LocalPoint(rng.uniform(-300, 300), rng.uniform(-300, 300)))
