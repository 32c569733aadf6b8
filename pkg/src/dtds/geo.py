"""Scene-local planar coordinates and lane geometry.

Local frames are equirectangular tangent planes around a scene origin:
``x`` metres east, ``y`` metres north, using the WGS-84 semi-major axis.
That is accurate to well below a decimetre at city scale. Altitude passes
through untouched.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

from dtds.errors import EmptyNetwork, InvalidNetwork, OutOfRange, UnknownLane
from dtds.model import GeoPosition

EARTH_RADIUS = 6_378_137.0
MAX_DEGREES = 1.0
MAX_LOCAL = 150_000.0


class LocalPoint(NamedTuple):
    x: float
    y: float


class LaneProjection(NamedTuple):
    lane_id: str
    s: float
    lateral: float
    heading: float


def geo_to_local(origin: GeoPosition, p: GeoPosition) -> LocalPoint:
    dlat = p.lat - origin.lat
    dlon = p.lon - origin.lon
    if abs(dlat) > MAX_DEGREES or abs(dlon) > MAX_DEGREES:
        raise OutOfRange(f"{p} is more than {MAX_DEGREES} degree from the origin")
    x = EARTH_RADIUS * math.radians(dlon) * math.cos(math.radians(origin.lat))
    y = EARTH_RADIUS * math.radians(dlat)
    return LocalPoint(x, y)


def local_to_geo(origin: GeoPosition, lp: LocalPoint) -> GeoPosition:
    if not (math.isfinite(lp.x) and math.isfinite(lp.y)) or abs(lp.x) > MAX_LOCAL or abs(lp.y) > MAX_LOCAL:
        raise OutOfRange(f"local point {lp} is outside the {MAX_LOCAL / 1000:.0f} km box")
    lat = origin.lat + math.degrees(lp.y / EARTH_RADIUS)
    lon = origin.lon + math.degrees(lp.x / (EARTH_RADIUS * math.cos(math.radians(origin.lat))))
    return GeoPosition(lat, lon, origin.alt)


def heading_of(dx: float, dy: float) -> float:
    """Direction of travel in degrees clockwise from north, in [0, 360)."""
    h = math.degrees(math.atan2(dx, dy)) % 360.0
    return 0.0 if h >= 360.0 else h


def heading_to_yaw(heading: float) -> float:
    yaw = (heading + 180.0) % 360.0 - 180.0
    return -180.0 if yaw >= 180.0 else yaw


@dataclass
class Lane:
    id: str
    points: list[LocalPoint]
    speed_limit: float
    cumulative: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.cumulative = [0.0]
        for a, b in zip(self.points, self.points[1:]):
            self.cumulative.append(self.cumulative[-1] + math.hypot(b.x - a.x, b.y - a.y))

    @property
    def length(self) -> float:
        return self.cumulative[-1]


@dataclass
class RoadNetwork:
    origin: GeoPosition
    lanes: dict[str, Lane]
    connections: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        for lane_id, lane in self.lanes.items():
            if lane_id != lane.id:
                raise InvalidNetwork(f"lane key {lane_id!r} does not match lane id {lane.id!r}")
            if len(lane.points) < 2:
                raise InvalidNetwork(f"lane {lane_id} needs at least two points")
            for a, b in zip(lane.points, lane.points[1:]):
                if a == b:
                    raise InvalidNetwork(f"lane {lane_id} repeats point {a}")
            if not lane.speed_limit > 0:
                raise InvalidNetwork(f"lane {lane_id} needs a positive speed limit")
        for src, dst in self.connections:
            if src not in self.lanes or dst not in self.lanes:
                raise InvalidNetwork(f"connection {src}->{dst} references an unknown lane")

    def is_loop(self, lane_id: str) -> bool:
        return (lane_id, lane_id) in self.connections

    def lane(self, lane_id: str) -> Lane:
        try:
            return self.lanes[lane_id]
        except KeyError:
            raise UnknownLane(f"no lane {lane_id!r}") from None

    def to_json(self) -> dict[str, Any]:
        return {
            "origin": {"lat": self.origin.lat, "lon": self.origin.lon},
            "lanes": [
                {"id": lane.id, "points": [[p.x, p.y] for p in lane.points], "speedLimit": lane.speed_limit}
                for lane in self.lanes.values()
            ],
            "connections": [{"from": a, "to": b} for a, b in self.connections],
        }


def network_from_json(doc: dict[str, Any]) -> RoadNetwork:
    try:
        origin = GeoPosition(float(doc["origin"]["lat"]), float(doc["origin"]["lon"]), float(doc["origin"].get("alt", 0.0)))
        lanes = {}
        for entry in doc["lanes"]:
            if entry["id"] in lanes:
                raise InvalidNetwork(f"duplicate lane id {entry['id']!r}")
            points = [LocalPoint(float(x), float(y)) for x, y in entry["points"]]
            lanes[entry["id"]] = Lane(entry["id"], points, float(entry["speedLimit"]))
        connections = [(c["from"], c["to"]) for c in doc.get("connections", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidNetwork(f"malformed road network: {exc}") from exc
    return RoadNetwork(origin, lanes, connections)


def load_network(path: str | Path) -> RoadNetwork:
    with open(path, encoding="utf-8") as fh:
        return network_from_json(json.load(fh))


def _closest_on_segment(p: LocalPoint, a: LocalPoint, b: LocalPoint) -> tuple[float, float]:
    """Return (t in [0, 1], distance) of the point of segment ab nearest to p."""
    dx, dy = b.x - a.x, b.y - a.y
    t = ((p.x - a.x) * dx + (p.y - a.y) * dy) / (dx * dx + dy * dy)
    t = min(1.0, max(0.0, t))
    return t, math.hypot(a.x + t * dx - p.x, a.y + t * dy - p.y)


def project_to_lane(network: RoadNetwork, lp: LocalPoint, eps: float = 1e-12) -> LaneProjection:
    """Nearest point over all lane polylines; ties go to the lexicographically first lane."""
    if not network.lanes:
        raise EmptyNetwork("road network has no lanes")
    best: LaneProjection | None = None
    for lane_id in sorted(network.lanes):
        lane = network.lanes[lane_id]
        for i, (a, b) in enumerate(zip(lane.points, lane.points[1:])):
            t, dist = _closest_on_segment(lp, a, b)
            if best is None or dist < best.lateral - eps:
                seg_len = lane.cumulative[i + 1] - lane.cumulative[i]
                best = LaneProjection(lane_id, lane.cumulative[i] + t * seg_len, dist, heading_of(b.x - a.x, b.y - a.y))
    return best


def lane_point(network: RoadNetwork, lane_id: str, s: float, eps: float = 1e-9) -> tuple[LocalPoint, float]:
    """Interpolated point and heading at arc length ``s`` along a lane."""
    lane = network.lane(lane_id)
    if not -eps <= s <= lane.length + eps:
        raise OutOfRange(f"s={s} outside lane {lane_id} of length {lane.length}")
    s = min(max(s, 0.0), lane.length)
    i = min(bisect.bisect_right(lane.cumulative, s) - 1, len(lane.points) - 2)
    a, b = lane.points[i], lane.points[i + 1]
    seg_len = lane.cumulative[i + 1] - lane.cumulative[i]
    t = (s - lane.cumulative[i]) / seg_len
    point = LocalPoint(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
    return point, heading_of(b.x - a.x, b.y - a.y)
