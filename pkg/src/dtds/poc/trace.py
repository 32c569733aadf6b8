"""GPS traces: loading, synthesis along a lane, and timed replay over MQTT."""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

from dtds.errors import Malformed, NonMonotonicTime
from dtds.geo import RoadNetwork, heading_to_yaw, lane_point, local_to_geo
from dtds.model import format_timestamp, local_name, utcnow
from dtds.poc import mqttio

FIELDS = ("t", "lat", "lon", "roll", "pitch", "yaw")


@dataclass(frozen=True)
class TracePoint:
    t: float
    lat: float
    lon: float
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def to_json(self) -> dict[str, float]:
        return asdict(self)


def default_ingest_topic(tenant: str, vehicle_id: str) -> str:
    return f"dtds/{tenant}/ingest/{local_name(vehicle_id)}"


def parse_point(doc: object, where: str = "") -> TracePoint:
    if not isinstance(doc, dict):
        raise Malformed(f"{where}trace point must be a JSON object")
    values = {}
    for name in FIELDS:
        raw = doc.get(name, 0.0 if name in ("roll", "pitch", "yaw") else None)
        if isinstance(raw, bool) or not isinstance(raw, (int, float)) or not math.isfinite(raw):
            raise Malformed(f"{where}field {name!r} must be a finite number")
        values[name] = float(raw)
    return TracePoint(**values)


def load_trace(path: str | Path) -> list[TracePoint]:
    points: list[TracePoint] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except ValueError as exc:
                raise Malformed(f"line {lineno}: {exc}") from None
            point = parse_point(doc, f"line {lineno}: ")
            if points and point.t < points[-1].t:
                raise NonMonotonicTime(f"line {lineno}: t={point.t} after t={points[-1].t}")
            points.append(point)
    return points


def write_trace(path: str | Path, points: Iterable[TracePoint]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in points:
            fh.write(json.dumps(p.to_json()) + "\n")


def synthetic_trace(
    network: RoadNetwork, lane_id: str, speed: float, duration: float, rate: float = 10.0, s0: float = 0.0
) -> list[TracePoint]:
    """Constant-speed drive along one lane, wrapping on loops and stopping at the end otherwise."""
    lane = network.lane(lane_id)
    points = []
    for k in range(int(round(duration * rate)) + 1):
        t = k / rate
        s = s0 + speed * t
        s = math.fmod(s, lane.length) if network.is_loop(lane_id) else min(s, lane.length)
        lp, heading = lane_point(network, lane_id, s)
        g = local_to_geo(network.origin, lp)
        points.append(TracePoint(round(t, 6), g.lat, g.lon, 0.0, 0.0, heading_to_yaw(heading)))
    return points


def fix_payload(point: TracePoint, ts: str | None = None) -> bytes:
    doc = point.to_json()
    doc["ts"] = ts or format_timestamp(utcnow())
    return json.dumps(doc).encode()


def replay_trace(
    trace: list[TracePoint],
    speed_factor: float,
    endpoint: str,
    topic: str,
    stop: threading.Event | None = None,
    on_publish: Callable[[TracePoint, str], None] | None = None,
    qos: int = 0,
) -> int:
    """Publish each point at wall-clock ``t / speed_factor`` after start; returns the count sent."""
    if not speed_factor > 0:
        raise ValueError("speed_factor must be positive")
    client = mqttio.connect(endpoint, "dtds-replay")
    sent = 0
    try:
        start = time.monotonic()
        t0 = trace[0].t if trace else 0.0
        for point in trace:
            delay = start + (point.t - t0) / speed_factor - time.monotonic()
            if delay > 0 and (stop.wait(delay) if stop else time.sleep(delay)):
                break
            if stop is not None and stop.is_set():
                break
            ts = format_timestamp(utcnow())
            client.publish(topic, fix_payload(point, ts), qos=qos)
            sent += 1
            if on_publish is not None:
                on_publish(point, ts)
    finally:
        mqttio.close(client)
    return sent
