"""Wall-clock driven simulator controller.

Each step reads the real car's latest stored position, projects it onto the
road network and advances the virtual vehicles with ``sim_step``. Followers
treat the real car as an obstacle that may stop at any moment (its speed
enters the safe-speed rule as zero), which keeps the no-collision bound valid
no matter how the physical car behaves between fixes. Publishing runs on its
own thread and only ever sends the newest snapshot.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, replace
from datetime import datetime

from dtds.client import DTDSClient
from dtds.errors import AlreadyExists, DTDSError, NotFound, OutOfRange, ServerUnreachable
from dtds.geo import RoadNetwork, geo_to_local, heading_to_yaw, lane_point, local_to_geo, project_to_lane
from dtds.model import GeoPosition, format_timestamp, from_epoch
from dtds.poc.sim import SimConfig, SimState, Vehicle, gaps, leaders, sim_step

log = logging.getLogger(__name__)

OFF_NETWORK_LATERAL = 10.0
GAP_TOLERANCE = 1e-6


def vehicle_fragment(network: RoadNetwork, v: Vehicle, observed_at: datetime) -> dict:
    lp, heading = lane_point(network, v.lane_id, v.s)
    g = local_to_geo(network.origin, lp)
    stamp = format_timestamp(observed_at)
    return {
        "position": {
            "type": "GeoProperty",
            "value": {"type": "Point", "coordinates": [g.lon, g.lat]},
            "observedAt": stamp,
        },
        "pose": {
            "type": "Property",
            "value": {"orientation": {"roll": 0.0, "pitch": 0.0, "yaw": heading_to_yaw(heading)}},
            "observedAt": stamp,
        },
        "speed": {"type": "Property", "value": v.v, "unitCode": "MTS", "observedAt": stamp},
    }


def publish_sim_state(state: SimState, client: DTDSClient, observed_at: datetime) -> int:
    """PATCH every active virtual vehicle; returns the number of patches sent."""
    sent = 0
    for v in state.virtual():
        if not v.active:
            continue
        client.patch(v.id, vehicle_fragment(state.network, v, observed_at))
        sent += 1
    return sent


def locate_real(network: RoadNetwork, position: GeoPosition | None, vid: str, length: float = 4.5) -> Vehicle:
    """The real car as a sim obstacle; inactive when unknown or off the network."""
    if position is None:
        return Vehicle(vid, next(iter(sorted(network.lanes))), 0.0, 0.0, length, is_real=True, active=False)
    try:
        proj = project_to_lane(network, geo_to_local(network.origin, position))
    except OutOfRange:
        return Vehicle(vid, next(iter(sorted(network.lanes))), 0.0, 0.0, length, is_real=True, active=False)
    active = proj.lateral <= OFF_NETWORK_LATERAL
    return Vehicle(vid, proj.lane_id, proj.s, 0.0, length, is_real=True, active=active)


@dataclass
class ControllerStats:
    steps: int = 0
    min_gap: float = math.inf
    violations: int = 0
    min_ttc: float = math.inf
    patches: int = 0
    publish_errors: int = 0
    skipped_cycles: int = 0
    off_network_steps: int = 0
    real_reads: int = 0

    def to_json(self) -> dict:
        return {
            "steps": self.steps,
            "minGap": None if math.isinf(self.min_gap) else self.min_gap,
            "gapViolations": self.violations,
            "minTimeToCollision": None if math.isinf(self.min_ttc) else self.min_ttc,
            "patches": self.patches,
            "publishErrors": self.publish_errors,
            "skippedCycles": self.skipped_cycles,
            "offNetworkSteps": self.off_network_steps,
        }


class SimController:
    def __init__(
        self,
        server: str,
        tenant: str,
        network: RoadNetwork,
        cfg: SimConfig,
        vehicles: list[Vehicle],
        real_id: str | None = None,
    ) -> None:
        self.network = network
        self.cfg = cfg
        self.real_id = real_id
        self.client = DTDSClient(server, tenant, timeout=5.0)
        self.pub_client = DTDSClient(server, tenant, timeout=5.0)
        self.stats = ControllerStats()
        real = [locate_real(network, None, real_id)] if real_id else []
        self.state = SimState(network, tuple(list(vehicles) + real))
        self._stop = threading.Event()
        self._pub_cond = threading.Condition()
        self._pub_item: tuple[SimState, datetime] | None = None
        self._threads: list[threading.Thread] = []
        self.wall_start = 0.0

    def ensure_entities(self) -> None:
        for v in self.state.virtual():
            doc = {"id": v.id, "type": "DynamicAsset"}
            doc.update(vehicle_fragment(self.network, v, from_epoch(time.time())))
            try:
                self.client.create_entity(doc)
            except AlreadyExists:
                pass

    def _read_real(self) -> Vehicle | None:
        if not self.real_id:
            return None
        try:
            entity = self.client.get_entity(self.real_id, local=True)
        except (NotFound, ServerUnreachable) as exc:
            log.debug("real car unavailable: %s", exc)
            return None
        self.stats.real_reads += 1
        return locate_real(self.network, entity.position(), self.real_id)

    def _record(self, state: SimState) -> None:
        lead = leaders(state)
        for vid, _, gap in gaps(state):
            self.stats.min_gap = min(self.stats.min_gap, gap)
            if gap < self.cfg.g_min - GAP_TOLERANCE:
                self.stats.violations += 1
                log.error("gap violation: %s at %.3f m", vid, gap)
            follower = state.by_id(vid)
            leader = lead[vid][0]
            if follower.v > leader.v:
                self.stats.min_ttc = min(self.stats.min_ttc, gap / (follower.v - leader.v))

    def step(self) -> SimState:
        """One control step: refresh the real car, then advance the model."""
        real = self._read_real()
        if real is not None:
            if not real.active:
                self.stats.off_network_steps += 1
            vehicles = tuple(real if v.is_real else v for v in self.state.vehicles)
            self.state = replace(self.state, vehicles=vehicles)
        self.state = sim_step(self.state, self.cfg)
        self.stats.steps += 1
        self._record(self.state)
        return self.state

    def _run_steps(self, duration: float | None) -> None:
        self.wall_start = time.time()
        start = time.monotonic()
        k = 0
        next_publish = 0.0
        while not self._stop.is_set():
            if duration is not None and k * self.cfg.dt >= duration:
                break
            delay = start + (k + 1) * self.cfg.dt - time.monotonic()
            if delay > 0 and self._stop.wait(delay):
                break
            self.step()
            k += 1
            if self.state.t + 1e-9 >= next_publish:
                next_publish += self.cfg.publish_period
                with self._pub_cond:
                    if self._pub_item is not None:
                        self.stats.skipped_cycles += 1
                    self._pub_item = (self.state, from_epoch(self.wall_start + self.state.t))
                    self._pub_cond.notify()
        self._stop.set()
        with self._pub_cond:
            self._pub_cond.notify_all()

    def _run_publisher(self) -> None:
        while True:
            with self._pub_cond:
                while self._pub_item is None and not self._stop.is_set():
                    self._pub_cond.wait(0.2)
                item, self._pub_item = self._pub_item, None
            if item is None:
                return
            try:
                self.stats.patches += publish_sim_state(item[0], self.pub_client, item[1])
            except DTDSError as exc:
                self.stats.publish_errors += 1
                log.warning("publish cycle skipped: %s", exc)

    def start(self, duration: float | None = None) -> SimController:
        self._threads = [
            threading.Thread(target=self._run_steps, args=(duration,), name="sim-steps", daemon=True),
            threading.Thread(target=self._run_publisher, name="sim-publish", daemon=True),
        ]
        for t in self._threads:
            t.start()
        return self

    def join(self, timeout: float | None = None) -> None:
        for t in self._threads:
            t.join(timeout)

    def stop(self) -> None:
        self._stop.set()
        with self._pub_cond:
            self._pub_cond.notify_all()
        self.join(10)
        self.client.close()
        self.pub_client.close()
