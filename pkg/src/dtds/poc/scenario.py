"""End-to-end scenario: replayer, sampler, simulator and watcher against a live service."""

from __future__ import annotations

import bisect
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any

from dtds.client import DTDSClient
from dtds.errors import AlreadyExists, DTDSError
from dtds.geo import RoadNetwork, load_network
from dtds.model import GeoPosition, format_timestamp, parse_timestamp
from dtds.poc import mqttio
from dtds.poc.controller import SimController, locate_real
from dtds.poc.fixtures import REAL_CAR_ID, SCENE_ID, loop_network, scene_documents
from dtds.poc.sampler import Sampler
from dtds.poc.sim import SimConfig, spawn_vehicles
from dtds.poc.trace import default_ingest_topic, load_trace, replay_trace, synthetic_trace
from dtds.poc.watcher import Watcher

log = logging.getLogger(__name__)

HISTOGRAM_EDGES_MS = (5, 10, 20, 50, 100, 200, 500, 1000)


@dataclass
class ScenarioConfig:
    server: str
    broker: str
    tenant: str = ""
    scene_id: str = SCENE_ID
    real_car_id: str = REAL_CAR_ID
    trace_path: str | None = None
    network_path: str | None = None
    duration: float = 60.0
    sampling_period: float = 0.1
    trace_rate: float = 10.0
    real_speed: float = 5.0
    speed_factor: float = 1.0
    sim: SimConfig = field(default_factory=SimConfig)
    setup_scene: bool = True

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> ScenarioConfig:
        keys = {
            "server": "server",
            "broker": "broker",
            "tenant": "tenant",
            "sceneId": "scene_id",
            "realCarId": "real_car_id",
            "tracePath": "trace_path",
            "networkPath": "network_path",
            "duration": "duration",
            "samplingPeriod": "sampling_period",
            "traceRate": "trace_rate",
            "realSpeed": "real_speed",
            "speedFactor": "speed_factor",
            "setupScene": "setup_scene",
        }
        kwargs = {py: doc[js] for js, py in keys.items() if js in doc}
        sim_keys = {
            "dt": "dt",
            "gMin": "g_min",
            "tau": "tau",
            "aAccel": "a_accel",
            "publishPeriod": "publish_period",
            "nVirtual": "n_virtual",
            "vMax": "v_max",
            "length": "length",
            "seed": "seed",
        }
        sim = doc.get("sim") or {}
        kwargs["sim"] = SimConfig(**{py: sim[js] for js, py in sim_keys.items() if js in sim})
        return cls(**kwargs)


def histogram(samples_ms: list[float]) -> dict[str, Any]:
    """Bucket counts plus nearest-rank percentiles."""
    data = sorted(samples_ms)
    buckets = [0] * (len(HISTOGRAM_EDGES_MS) + 1)
    for x in data:
        buckets[bisect.bisect_left(HISTOGRAM_EDGES_MS, x)] += 1
    labels = [f"<={e}ms" for e in HISTOGRAM_EDGES_MS] + [f">{HISTOGRAM_EDGES_MS[-1]}ms"]

    def rank(q: float) -> float | None:
        if not data:
            return None
        return data[max(0, math.ceil(q * len(data)) - 1)]

    return {
        "count": len(data),
        "median": rank(0.5),
        "p99": rank(0.99),
        "max": data[-1] if data else None,
        "mean": sum(data) / len(data) if data else None,
        "buckets": dict(zip(labels, buckets)),
    }


def render_histogram(name: str, h: dict[str, Any]) -> str:
    lines = [f"{name}: n={h['count']} median={h['median']} p99={h['p99']} max={h['max']}"]
    peak = max(h["buckets"].values() or [1]) or 1
    for label, count in h["buckets"].items():
        lines.append(f"  {label:>9} {count:7d} {'#' * round(40 * count / peak)}")
    return "\n".join(lines)


def fetch_changes(client: DTDSClient, after_seq: int = 0) -> list[dict[str, Any]]:
    events: list[dict[str, Any]] = []
    while True:
        page = client.changes(after_seq, 1000)
        events.extend(page["events"])
        if not page["events"]:
            return events
        after_seq = page["events"][-1]["seq"]


def latest_seq(client: DTDSClient) -> int:
    events = fetch_changes(client)
    return events[-1]["seq"] if events else 0


def _ms(a: datetime, b: datetime) -> float:
    return (b - a).total_seconds() * 1000.0


def staleness(published: list[datetime], commits: list[tuple[datetime, datetime]]) -> list[float]:
    """How far the stored fix lags the newest published fix, sampled at each publish.

    ``commits`` are (committedAt, observedAt) pairs. Staleness rises only when a
    fix is published, so its maximum is attained at publish instants. Publishes
    before the first commit of the run are startup, not lag, and are skipped.
    """
    commits = sorted(commits)
    times = [c for c, _ in commits]
    out = []
    best = None
    j = 0
    for ts in sorted(published):
        while j < len(commits) and times[j] <= ts:
            obs = commits[j][1]
            best = obs if best is None or obs > best else best
            j += 1
        if best is not None:
            out.append(max(0.0, (ts - best).total_seconds()))
    return out


def run_scenario(cfg: ScenarioConfig) -> dict[str, Any]:
    """Run the whole pipeline once; failures abort with a partial report."""
    report: dict[str, Any] = {"config": {**asdict(cfg), "sim": asdict(cfg.sim)}, "aborted": None}
    client = DTDSClient(cfg.server, cfg.tenant)
    started: list[Any] = []
    try:
        probe = mqttio.connect(cfg.broker, "dtds-probe")
        mqttio.close(probe)
        client._request("GET", "/dtds/v1/health")

        network: RoadNetwork = load_network(cfg.network_path) if cfg.network_path else loop_network()
        lane0 = sorted(network.lanes)[0]
        if cfg.trace_path:
            trace = load_trace(cfg.trace_path)
        else:
            trace = synthetic_trace(network, lane0, cfg.real_speed, cfg.duration, cfg.trace_rate)
        first = GeoPosition(trace[0].lat, trace[0].lon) if trace else None
        real = locate_real(network, first, cfg.real_car_id, cfg.sim.length)
        virtual = spawn_vehicles(network, cfg.sim, real=real if real.active else None) if cfg.sim.n_virtual else []

        if cfg.setup_scene:
            for doc in scene_documents(network, virtual, real, cfg.broker, cfg.server, cfg.tenant):
                try:
                    client.create_entity(doc)
                except AlreadyExists:
                    pass
        seq0 = latest_seq(client)

        watcher = Watcher(cfg.server, cfg.tenant, cfg.scene_id, cfg.broker).start()
        started.append(watcher)
        topic = default_ingest_topic(cfg.tenant, cfg.real_car_id)
        sampler = Sampler(cfg.broker, topic, cfg.server, cfg.tenant, cfg.real_car_id, cfg.sampling_period).start()
        started.append(sampler)
        controller = SimController(cfg.server, cfg.tenant, network, cfg.sim, virtual, cfg.real_car_id)
        controller.ensure_entities()
        controller.start(cfg.duration / cfg.speed_factor)
        started.append(controller)

        published: list[datetime] = []
        replay_trace(trace, cfg.speed_factor, cfg.broker, topic, on_publish=lambda p, ts: published.append(parse_timestamp(ts)))
        controller.join(cfg.duration + 10)
        time.sleep(0.5)
        sampler.stop()
        controller.stop()
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:
            stats = client.subscription_stats(watcher.subscription_id)
            if stats.get("queued", 0) == 0:
                break
            time.sleep(0.1)
        time.sleep(0.5)
        sub_stats = client.subscription_stats(watcher.subscription_id)
        watcher.stop()
        started.clear()

        events = fetch_changes(client, seq0)
        watched = {cfg.real_car_id} | {v.id for v in virtual}
        pos_events = [e for e in events if e["attrName"] == "position" and e["entityId"] in watched]
        real_commits = {
            e["attr"]["observedAt"]: parse_timestamp(e["committedAt"])
            for e in pos_events
            if e["entityId"] == cfg.real_car_id and e["attr"].get("observedAt")
        }
        receipts: dict[str, datetime] = {}
        for rec in watcher.records:
            if rec.line["entityId"] == cfg.real_car_id and rec.line["attr"] == "position" and rec.observed_at:
                receipts.setdefault(rec.observed_key, rec.received_at)

        hop_commit, hop_notify, end_to_end = [], [], []
        for ts in published:
            stamp = format_timestamp(ts)
            if stamp not in real_commits:
                continue
            committed = real_commits[stamp]
            hop_commit.append(_ms(ts, committed))
            if stamp in receipts:
                hop_notify.append(_ms(committed, receipts[stamp]))
                end_to_end.append(_ms(ts, receipts[stamp]))

        stale = staleness(
            published,
            [(parse_timestamp(e["committedAt"]), parse_timestamp(e["attr"]["observedAt"])) for e in pos_events
             if e["entityId"] == cfg.real_car_id],
        )
        received_positions = sum(1 for rec in watcher.records if rec.line["attr"] == "position")
        report.update(
            {
                "fixesPublished": len(published),
                "samplerPatches": sampler.stats.patches,
                "samplerErrors": sampler.stats.errors,
                "simulator": controller.stats.to_json(),
                "minGap": controller.stats.to_json()["minGap"],
                "gapViolations": controller.stats.violations,
                "expectedPositionNotifications": len(pos_events),
                "receivedPositionNotifications": received_positions,
                "watcherCoverage": received_positions / len(pos_events) if pos_events else 1.0,
                "maxStalenessSeconds": max(stale) if stale else None,
                "stalenessLimitSeconds": 2 * cfg.sampling_period,
                "latency": {
                    "publishToCommit": histogram(hop_commit),
                    "commitToReceipt": histogram(hop_notify),
                    "endToEnd": histogram(end_to_end),
                },
                "subscription": sub_stats,
            }
        )
    except DTDSError as exc:
        report["aborted"] = f"{exc.code}: {exc}"
        for component in reversed(started):
            try:
                component.stop()
            except DTDSError:
                pass
    finally:
        client.close()
    return report


def load_config(path: str | Path) -> ScenarioConfig:
    return ScenarioConfig.from_json(json.loads(Path(path).read_text()))
