"""Krauss-style single-lane micro-simulation with a provable no-collision bound.

Each virtual follower drives no faster than the safe speed::

    v_safe = max(0, v_leader + (gap - g_min) / tau)

so that, for ``dt <= tau`` and a leader that holds its speed for the step,
the gap after the step is at least ``g_min`` whenever it was before. Speeds
are resolved leader-first: a follower's bound uses its leader's speed *for
the step being computed*. On loop lanes there is no first leader, so the
bounds are relaxed to a fixed point (at most one pass per vehicle, since the
slack terms are non-negative).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace
from typing import Iterable

from dtds.geo import RoadNetwork

INF = math.inf


@dataclass(frozen=True)
class Vehicle:
    id: str
    lane_id: str
    s: float
    v: float = 0.0
    length: float = 4.5
    v_max: float = 13.9
    is_real: bool = False
    active: bool = True


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    g_min: float = 2.0
    tau: float = 1.0
    a_accel: float = 2.0
    publish_period: float = 0.1
    n_virtual: int = 5
    v_max: float = 13.9
    length: float = 4.5
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.tau < self.dt:
            raise ValueError("tau must be >= dt")
        if not self.g_min > 0:
            raise ValueError("g_min must be positive")


@dataclass(frozen=True)
class SimState:
    network: RoadNetwork
    vehicles: tuple[Vehicle, ...]
    t: float = 0.0
    pending: tuple[Vehicle, ...] = field(default=())
    """Virtual vehicles that left an open lane and wait for a free entry."""

    def by_id(self, vid: str) -> Vehicle:
        return next(v for v in self.vehicles + self.pending if v.id == vid)

    def virtual(self) -> list[Vehicle]:
        return [v for v in self.vehicles if not v.is_real]


def safe_speed(v_leader: float, gap: float, cfg: SimConfig) -> float:
    if gap == INF:
        return INF
    return max(0.0, v_leader + (gap - cfg.g_min) / cfg.tau)


def leaders(state: SimState) -> dict[str, tuple[Vehicle, float]]:
    """Map vehicle id -> (leader, gap) for every active vehicle that has one."""
    out: dict[str, tuple[Vehicle, float]] = {}
    by_lane: dict[str, list[Vehicle]] = {}
    for v in state.vehicles:
        if v.active:
            by_lane.setdefault(v.lane_id, []).append(v)
    for lane_id, lane_vehicles in by_lane.items():
        lane_vehicles.sort(key=lambda v: (v.s, v.id))
        loop = state.network.is_loop(lane_id)
        length = state.network.lane(lane_id).length
        n = len(lane_vehicles)
        for i, follower in enumerate(lane_vehicles):
            if i + 1 < n:
                leader = lane_vehicles[i + 1]
                out[follower.id] = (leader, leader.s - follower.s - leader.length)
            elif loop and n > 1:
                leader = lane_vehicles[0]
                out[follower.id] = (leader, leader.s + length - follower.s - leader.length)
    return out


def gaps(state: SimState) -> list[tuple[str, str, float]]:
    """(follower, leader, gap) for every virtual follower."""
    return [
        (vid, leader.id, gap)
        for vid, (leader, gap) in sorted(leaders(state).items())
        if not state.by_id(vid).is_real
    ]


def _entry_clear(vehicles: Iterable[Vehicle], lane_id: str, cfg: SimConfig) -> bool:
    # a newcomer at s=0 must start at least g_min behind every vehicle on the lane
    return all(not (v.active and v.lane_id == lane_id and v.s - v.length < cfg.g_min) for v in vehicles)


def sim_step(state: SimState, cfg: SimConfig, dt: float | None = None) -> SimState:
    """Advance virtual vehicles by one step; real vehicles are left untouched."""
    dt = cfg.dt if dt is None else dt
    if dt > cfg.tau:
        raise ValueError("dt must not exceed tau")
    net = state.network
    lead = leaders(state)
    speeds: dict[str, float] = {}
    bounds: dict[str, float] = {}
    for v in state.vehicles:
        if v.is_real or not v.active:
            speeds[v.id] = v.v
            continue
        limit = net.lane(v.lane_id).speed_limit
        bounds[v.id] = max(0.0, min(v.v + cfg.a_accel * dt, v.v_max, limit))
        speeds[v.id] = bounds[v.id]

    # decreasing relaxation to the greatest speeds satisfying every safe-speed bound;
    # n+1 sweeps suffice unless a loop is already below g_min, hence the larger cap
    for _ in range(64 * (len(bounds) + 1)):
        changed = False
        for vid in bounds:
            if vid not in lead:
                continue
            leader, gap = lead[vid]
            cap = min(bounds[vid], safe_speed(speeds[leader.id], gap, cfg))
            if cap < speeds[vid]:
                speeds[vid] = cap
                changed = True
        if not changed:
            break

    moved: list[Vehicle] = []
    exited: list[Vehicle] = []
    for v in state.vehicles:
        if v.is_real or not v.active:
            moved.append(v)
            continue
        lane = net.lane(v.lane_id)
        s = v.s + speeds[v.id] * dt
        if s > lane.length:
            if net.is_loop(v.lane_id):
                s = math.fmod(s, lane.length)
            else:
                exited.append(replace(v, s=0.0, v=0.0, active=False))
                continue
        moved.append(replace(v, s=s, v=speeds[v.id]))

    pending = list(state.pending) + exited
    still_pending = []
    for v in pending:
        if _entry_clear(moved, v.lane_id, cfg):
            moved.append(replace(v, s=0.0, v=0.0, active=True))
        else:
            still_pending.append(v)
    order = {v.id: i for i, v in enumerate(state.vehicles)}
    moved.sort(key=lambda v: order.get(v.id, len(order)))
    return SimState(net, tuple(moved), state.t + dt, tuple(still_pending))


def spawn_vehicles(
    network: RoadNetwork,
    cfg: SimConfig,
    lanes: list[str] | None = None,
    real: Vehicle | None = None,
    prefix: str = "urn:ngsi-ld:DynamicAsset:virtual",
) -> list[Vehicle]:
    """Spread ``cfg.n_virtual`` stopped vehicles uniformly over the given lanes.

    Lane order is shuffled with the configured seed. On a lane shared with
    the real vehicle, slots are laid out starting from the real vehicle's
    position so that nobody spawns inside its safety gap.
    """
    lanes = sorted(lanes or network.lanes)
    random.Random(cfg.seed).shuffle(lanes)
    per_lane = {lane: 0 for lane in lanes}
    for i in range(cfg.n_virtual):
        per_lane[lanes[i % len(lanes)]] += 1
    vehicles = []
    k = 0
    for lane_id in lanes:
        count = per_lane[lane_id]
        if not count:
            continue
        lane = network.lane(lane_id)
        shares_real = real is not None and real.active and real.lane_id == lane_id
        slots = count + 1 if shares_real else count
        spacing = lane.length / slots
        if spacing < cfg.g_min + cfg.length:
            raise ValueError(f"lane {lane_id} is too short for {count} vehicles")
        for j in range(count):
            if shares_real:
                s = real.s + (j + 1) * spacing
                s = math.fmod(s, lane.length) if network.is_loop(lane_id) else min(s, lane.length)
            else:
                s = (j + 0.5) * spacing
            k += 1
            vehicles.append(Vehicle(f"{prefix}{k}", lane_id, s, 0.0, cfg.length, cfg.v_max))
    return vehicles
