"""Textual scene watcher: one NDJSON line per notified attribute, or a live table."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Callable

from dtds.client import DTDSClient
from dtds.errors import DTDSError
from dtds.model import format_timestamp, local_name, parse_timestamp, utcnow
from dtds.poc import mqttio

SKIP = frozenset({"id", "type", "createdAt", "deletedAt"})


@dataclass(frozen=True)
class Record:
    line: dict[str, Any]
    received_at: datetime
    observed_at: datetime | None

    @property
    def observed_key(self) -> str | None:
        return format_timestamp(self.observed_at) if self.observed_at else None


def notification_records(payload: bytes, received_at: datetime) -> list[Record]:
    doc = json.loads(payload)
    records = []
    for frag in doc.get("data", []):
        for attr, body in sorted(frag.items()):
            if attr in SKIP or not isinstance(body, dict):
                continue
            latency = observed = None
            if body.get("observedAt"):
                observed = parse_timestamp(body["observedAt"])
                latency = (received_at - observed).total_seconds() * 1000.0
            line = {
                "receivedAt": format_timestamp(received_at),
                "entityId": frag["id"],
                "attr": attr,
                "value": body.get("value", body.get("object")),
                "latencyMs": latency,
            }
            records.append(Record(line, received_at, observed))
    return records


def notification_lines(payload: bytes, received_at: datetime) -> list[dict[str, Any]]:
    return [r.line for r in notification_records(payload, received_at)]


def render_table(state: dict[str, dict[str, Any]]) -> str:
    rows = [f"{'entity':<28} {'lat':>11} {'lon':>11} {'yaw':>7} {'speed':>6} {'lat.ms':>7}"]
    for eid in sorted(state):
        attrs = state[eid]
        pos = (attrs.get("position") or {}).get("coordinates") or [None, None]
        yaw = ((attrs.get("pose") or {}).get("orientation") or {}).get("yaw")
        speed = attrs.get("speed")

        def num(x, fmt):
            return format(x, fmt) if isinstance(x, (int, float)) else "-"

        rows.append(
            f"{local_name(eid)[:28]:<28} {num(pos[1], '11.6f')} {num(pos[0], '11.6f')} "
            f"{num(yaw, '7.1f')} {num(speed, '6.2f')} {num(attrs.get('_latency'), '7.1f')}"
        )
    return "\n".join(rows)


class Watcher:
    def __init__(
        self,
        server: str,
        tenant: str,
        scene_id: str,
        endpoint: str | None = None,
        qos: int = 0,
        sink: Callable[[dict[str, Any]], None] | None = None,
    ) -> None:
        self.client = DTDSClient(server, tenant)
        self.scene_id = scene_id
        self.endpoint = endpoint
        self.qos = qos
        self.sink = sink
        self.records: list[Record] = []
        self.state: dict[str, dict[str, Any]] = {}
        self.subscription_id: str | None = None
        self.acm: dict[str, Any] | None = None
        self._lock = threading.Lock()
        self._mqtt = None

    def _on_message(self, msg) -> None:
        received = utcnow()
        try:
            records = notification_records(msg.payload, received)
        except (ValueError, KeyError, TypeError, DTDSError):
            return
        with self._lock:
            for rec in records:
                line = rec.line
                self.records.append(rec)
                entry = self.state.setdefault(line["entityId"], {})
                entry[line["attr"]] = line["value"]
                entry["_latency"] = line["latencyMs"]
                if self.sink is not None:
                    self.sink(line)

    def start(self) -> Watcher:
        resp = self.client.watch_scene(self.scene_id, self.endpoint, qos=self.qos)
        self.subscription_id = resp["subscriptionId"]
        self.acm = resp["acm"]
        try:
            self._mqtt = mqttio.connect(
                self.endpoint or self.acm["endpoint"], "dtds-watch", [(self.acm["topic"], self.acm["qos"])], self._on_message
            )
        except Exception:
            self.client.delete_subscription(self.subscription_id)
            raise
        return self

    def snapshot(self) -> list[dict[str, Any]]:
        with self._lock:
            return [r.line for r in self.records]

    def table(self) -> str:
        with self._lock:
            return render_table(self.state)

    def stop(self) -> None:
        if self._mqtt is not None:
            mqttio.close(self._mqtt)
        if self.subscription_id is not None:
            try:
                self.client.delete_subscription(self.subscription_id)
            except DTDSError:
                pass
        self.client.close()
