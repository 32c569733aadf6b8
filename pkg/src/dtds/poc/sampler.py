"""Bridge from the MQTT fix stream into the real car's DynamicAsset.

Leading-edge sampling on a fixed grid of periods: a fix is patched as soon as
it arrives unless a patch already went out in the current period, in which
case the newest fix goes out when the next period opens. Anchoring the grid,
rather than timing from the previous patch, keeps one late patch from delaying
every fix after it. A fix is never sent unless it is newer than the last one
that was stored, so reconnects cannot replay stale positions.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from datetime import datetime

from dtds.client import DTDSClient
from dtds.errors import AllStale, DTDSError, Malformed, ServerUnreachable
from dtds.model import format_timestamp, parse_timestamp
from dtds.poc import mqttio
from dtds.poc.trace import TracePoint, parse_point

log = logging.getLogger(__name__)


def fix_fragment(point: TracePoint, ts: datetime) -> dict:
    stamp = format_timestamp(ts)
    return {
        "position": {
            "type": "GeoProperty",
            "value": {"type": "Point", "coordinates": [point.lon, point.lat]},
            "observedAt": stamp,
        },
        "pose": {
            "type": "Property",
            "value": {"orientation": {"roll": point.roll, "pitch": point.pitch, "yaw": point.yaw}},
            "observedAt": stamp,
        },
    }


@dataclass
class SamplerStats:
    fixes: int = 0
    malformed: int = 0
    patches: int = 0
    stale: int = 0
    errors: int = 0


class Sampler:
    def __init__(
        self,
        endpoint: str,
        topic: str,
        server: str,
        tenant: str,
        target_id: str,
        period: float = 0.1,
        on_patch=None,
    ) -> None:
        self.endpoint = endpoint
        self.topic = topic
        self.target_id = target_id
        self.period = period
        self.on_patch = on_patch
        self.client = DTDSClient(server, tenant, timeout=5.0)
        self.stats = SamplerStats()
        self._cond = threading.Condition()
        self._latest: tuple[TracePoint, datetime] | None = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._mqtt = None

    def _on_message(self, msg) -> None:
        try:
            doc = json.loads(msg.payload)
            point = parse_point(doc)
            ts = parse_timestamp(doc["ts"])
        except (ValueError, KeyError, TypeError, Malformed, DTDSError):
            self.stats.malformed += 1
            return
        with self._cond:
            self.stats.fixes += 1
            if self._latest is None or ts > self._latest[1]:
                self._latest = (point, ts)
                self._cond.notify()

    def start(self) -> Sampler:
        self._mqtt = mqttio.connect(self.endpoint, "dtds-sampler", [(self.topic, 0)], self._on_message)
        self._thread = threading.Thread(target=self._loop, name="sampler", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        with self._cond:
            self._cond.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=10)
        if self._mqtt is not None:
            mqttio.close(self._mqtt)
        self.client.close()

    def run(self) -> None:
        """Blocking form for the CLI."""
        self.start()
        try:
            while not self._stop.wait(0.5):
                pass
        finally:
            self.stop()

    def _loop(self) -> None:
        origin: float | None = None
        last_slot = -1
        last_ts: datetime | None = None
        backoff = 0.1
        while not self._stop.is_set():
            with self._cond:
                while not self._stop.is_set() and (self._latest is None or (last_ts and self._latest[1] <= last_ts)):
                    self._cond.wait(0.2)
            if self._stop.is_set():
                return
            if origin is None:
                origin = time.monotonic()
            wait = origin + (last_slot + 1) * self.period - time.monotonic()
            if wait > 0 and self._stop.wait(wait):
                return
            with self._cond:
                point, ts = self._latest
            started = time.monotonic()
            try:
                self.client.patch(self.target_id, fix_fragment(point, ts))
                self.stats.patches += 1
                backoff = 0.1
                if self.on_patch is not None:
                    self.on_patch(ts)
            except AllStale:
                self.stats.stale += 1
            except ServerUnreachable as exc:
                self.stats.errors += 1
                log.warning("server unreachable, retrying in %.1fs: %s", backoff, exc)
                self._stop.wait(backoff)
                backoff = min(backoff * 2, 2.0)
                continue
            except DTDSError as exc:
                self.stats.errors += 1
                log.warning("patch rejected: %s", exc)
            last_slot = int((started - origin) // self.period)
            last_ts = ts
