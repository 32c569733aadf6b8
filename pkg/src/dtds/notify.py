"""Subscriptions, event matching and notification delivery over HTTP and MQTT.

Matching is pure. Delivery runs on one worker thread per subscription, which
gives a single ordered queue per subscription and therefore per-entity
in-order delivery. Failed attempts back off exponentially and are dropped
after a bounded number of tries.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Iterable, Union
from urllib.parse import urlparse

import httpx
import paho.mqtt.client as mqtt

from dtds.errors import AlreadyExists, EmptyBatch, InvalidTarget, NotFound
from dtds.model import format_timestamp, is_entity_id, local_name, utcnow
from dtds.ontology import mqtt_endpoint_ok
from dtds.store import CREATED, DELETED, ChangeEvent, check_tenant

log = logging.getLogger(__name__)

OK = "ok"
RETRIABLE = "retriable"
DROPPED = "dropped"

DEFAULT_QUEUE_BOUND = 10_000
MAX_BATCH_EVENTS = 256


@dataclass(frozen=True)
class HttpTarget:
    uri: str


@dataclass(frozen=True)
class MqttTarget:
    endpoint: str
    topic: str
    qos: int = 0

    def host_port(self) -> tuple[str, int]:
        parsed = urlparse(self.endpoint)
        return parsed.hostname or "localhost", parsed.port or 1883


Target = Union[HttpTarget, MqttTarget]


def default_notify_topic(tenant: str, subscription_id: str) -> str:
    return f"dtds/{tenant}/notify/{local_name(subscription_id)}"


@dataclass
class Subscription:
    id: str
    tenant: str
    target: Target
    watched_types: frozenset[str] | None = None
    watched_ids: frozenset[str] | None = None
    watched_attributes: frozenset[str] = frozenset()
    throttling_ms: int | None = None

    def check(self) -> None:
        if not is_entity_id(self.id):
            raise InvalidTarget(f"subscription id {self.id!r} is not a URN", reason="BAD_ID")
        check_tenant(self.tenant)
        if not self.watched_types and not self.watched_ids:
            raise InvalidTarget("subscription needs watched types or ids", reason="MISSING_SCOPE")
        if self.throttling_ms is not None and self.throttling_ms < 0:
            raise InvalidTarget("throttlingMs must be >= 0", reason="BAD_THROTTLING")
        if isinstance(self.target, HttpTarget):
            if urlparse(self.target.uri).scheme not in ("http", "https"):
                raise InvalidTarget(f"unsupported notification URI {self.target.uri!r}", reason="BAD_SCHEME")
        else:
            if not mqtt_endpoint_ok(self.target.endpoint):
                raise InvalidTarget(f"bad MQTT endpoint {self.target.endpoint!r}", reason="BAD_SCHEME")
            topic = self.target.topic
            if not topic or "+" in topic or "#" in topic:
                raise InvalidTarget(f"MQTT topic {topic!r} must be non-empty and wildcard-free", reason="WILDCARD_TOPIC")
            if self.target.qos not in (0, 1):
                raise InvalidTarget("qos must be 0 or 1", reason="BAD_QOS")

    def to_json(self) -> dict[str, Any]:
        entities = [{"type": t} for t in sorted(self.watched_types or ())]
        entities += [{"id": i} for i in sorted(self.watched_ids or ())]
        if isinstance(self.target, HttpTarget):
            endpoint: dict[str, Any] = {"uri": self.target.uri, "accept": "application/json"}
        else:
            endpoint = {"uri": self.target.endpoint, "topic": self.target.topic, "qos": self.target.qos}
        doc: dict[str, Any] = {
            "id": self.id,
            "type": "Subscription",
            "entities": entities,
            "notification": {"endpoint": endpoint},
        }
        if self.watched_attributes:
            doc["watchedAttributes"] = sorted(self.watched_attributes)
        if self.throttling_ms is not None:
            doc["throttlingMs"] = self.throttling_ms
        return doc

    @classmethod
    def from_json(cls, doc: Any, tenant: str) -> Subscription:
        if not isinstance(doc, dict) or not isinstance(doc.get("id"), str):
            raise InvalidTarget("subscription document needs an id", reason="BAD_DOCUMENT")
        types, ids = set(), set()
        for entry in doc.get("entities") or []:
            if not isinstance(entry, dict):
                raise InvalidTarget("entities entries must be objects", reason="BAD_DOCUMENT")
            if entry.get("type"):
                types.add(entry["type"])
            if entry.get("id"):
                ids.add(entry["id"])
        endpoint = ((doc.get("notification") or {}).get("endpoint")) or {}
        uri = endpoint.get("uri")
        if not isinstance(uri, str):
            raise InvalidTarget("notification.endpoint.uri missing", reason="BAD_DOCUMENT")
        scheme = urlparse(uri).scheme
        target: Target
        if scheme == "mqtt":
            parsed = urlparse(uri)
            topic = endpoint.get("topic") or parsed.path.lstrip("/") or default_notify_topic(tenant, doc["id"])
            base = f"mqtt://{parsed.hostname}:{parsed.port}" if parsed.port else uri
            target = MqttTarget(base, topic, int(endpoint.get("qos", 0)))
        else:
            target = HttpTarget(uri)
        throttling = doc.get("throttlingMs")
        sub = cls(
            id=doc["id"],
            tenant=tenant,
            target=target,
            watched_types=frozenset(types) or None,
            watched_ids=frozenset(ids) or None,
            watched_attributes=frozenset(doc.get("watchedAttributes") or ()),
            throttling_ms=int(throttling) if throttling is not None else None,
        )
        sub.check()
        return sub


def subscription_matches(event: ChangeEvent, sub: Subscription) -> bool:
    if event.tenant != sub.tenant:
        return False
    if sub.watched_ids is not None and event.entity_id not in sub.watched_ids:
        return False
    if sub.watched_types is not None and event.entity_type not in sub.watched_types:
        return False
    if event.attr_name in (CREATED, DELETED):
        return not sub.watched_attributes
    return not sub.watched_attributes or event.attr_name in sub.watched_attributes


def match_subscriptions(event: ChangeEvent, subs: Iterable[Subscription]) -> list[Subscription]:
    return [s for s in subs if subscription_matches(event, s)]


@dataclass
class Notification:
    id: str
    subscription_id: str
    notified_at: datetime
    data: list[dict[str, Any]]

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "type": "Notification",
            "subscriptionId": self.subscription_id,
            "notifiedAt": format_timestamp(self.notified_at),
            "data": self.data,
        }

    def encode(self) -> bytes:
        return json.dumps(self.to_json(), separators=(",", ":")).encode()


def build_notification(subscription_id: str, events: Iterable[ChangeEvent]) -> Notification:
    """One fragment per entity holding the newest value of each changed attribute."""
    fragments: dict[str, dict[str, Any]] = {}
    for ev in sorted(events, key=lambda e: e.seq):
        frag = fragments.setdefault(ev.entity_id, {"id": ev.entity_id, "type": ev.entity_type})
        if ev.attr_name == CREATED:
            frag["createdAt"] = format_timestamp(ev.committed_at)
        elif ev.attr_name == DELETED:
            frag["deletedAt"] = format_timestamp(ev.committed_at)
        else:
            frag[ev.attr_name] = ev.attr.to_json()
    if not fragments:
        raise EmptyBatch("cannot build a notification from zero events")
    return Notification(f"urn:ngsi-ld:Notification:{uuid.uuid4()}", subscription_id, utcnow(), list(fragments.values()))


class MqttPool:
    """One connected paho client per broker endpoint, shared by all publishers."""

    def __init__(self, client_prefix: str = "dtds", connect_timeout: float = 5.0) -> None:
        self.client_prefix = client_prefix
        self.connect_timeout = connect_timeout
        self._clients: dict[tuple[str, int], mqtt.Client] = {}
        self._lock = threading.Lock()

    def client(self, host: str, port: int) -> mqtt.Client:
        key = (host, port)
        with self._lock:
            client = self._clients.get(key)
            if client is not None and client.is_connected():
                return client
            if client is not None:
                client.loop_stop()
                client.disconnect()
            client = mqtt.Client(
                mqtt.CallbackAPIVersion.VERSION2,
                client_id=f"{self.client_prefix}-{uuid.uuid4().hex[:12]}",
            )
            client.max_inflight_messages_set(1000)
            client.max_queued_messages_set(0)
            connected = threading.Event()
            client.on_connect = lambda c, u, f, rc, p=None: connected.set() if not rc.is_failure else None
            client.connect(host, port, keepalive=30)
            client.loop_start()
            if not connected.wait(self.connect_timeout):
                client.loop_stop()
                raise ConnectionError(f"MQTT broker {host}:{port} did not accept the connection")
            self._clients[key] = client
            return client

    def close(self) -> None:
        with self._lock:
            for client in self._clients.values():
                client.disconnect()
                client.loop_stop()
            self._clients.clear()


class Deliverer:
    """Single-attempt transports plus the bounded exponential-backoff retry loop."""

    def __init__(
        self,
        base_delay: float = 0.1,
        factor: float = 2.0,
        max_attempts: int = 5,
        http_timeout: float = 5.0,
        mqtt_pool: MqttPool | None = None,
    ) -> None:
        self.base_delay = base_delay
        self.factor = factor
        self.max_attempts = max_attempts
        self.http = httpx.Client(timeout=http_timeout)
        self.mqtt = mqtt_pool or MqttPool()
        self.ack_timeout = 5.0
        self.dropped = 0
        self._lock = threading.Lock()

    def attempt(self, payload: bytes, target: Target) -> str:
        if isinstance(target, HttpTarget):
            return self._attempt_http(payload, target)
        return self._attempt_mqtt(payload, target)

    def _attempt_http(self, payload: bytes, target: HttpTarget) -> str:
        try:
            resp = self.http.post(target.uri, content=payload, headers={"Content-Type": "application/json"})
        except httpx.HTTPError as exc:
            log.debug("HTTP delivery to %s failed: %s", target.uri, exc)
            return RETRIABLE
        if resp.is_success:
            return OK
        if resp.status_code >= 500 or resp.status_code in (408, 429):
            return RETRIABLE
        return DROPPED

    def _attempt_mqtt(self, payload: bytes, target: MqttTarget) -> str:
        try:
            client = self.mqtt.client(*target.host_port())
            info = client.publish(target.topic, payload, qos=target.qos)
            if info.rc != mqtt.MQTT_ERR_SUCCESS:
                return RETRIABLE
            info.wait_for_publish(self.ack_timeout)
            return OK if info.is_published() else RETRIABLE
        except (OSError, RuntimeError, ValueError) as exc:
            log.debug("MQTT delivery to %s failed: %s", target.endpoint, exc)
            return RETRIABLE

    def deliver(self, notification: Notification | bytes, target: Target, stop: threading.Event | None = None) -> str:
        payload = notification if isinstance(notification, bytes) else notification.encode()
        delay = self.base_delay
        for attempt in range(1, self.max_attempts + 1):
            result = self.attempt(payload, target)
            if result == OK:
                return OK
            if result == DROPPED or attempt == self.max_attempts:
                break
            if stop is not None and stop.wait(delay):
                break
            if stop is None:
                time.sleep(delay)
            delay *= self.factor
        with self._lock:
            self.dropped += 1
        log.warning("notification to %s dropped (total drops %d)", target, self.dropped)
        return DROPPED

    def close(self) -> None:
        self.http.close()
        self.mqtt.close()


@dataclass
class SubscriptionStats:
    delivered: int = 0
    dropped: int = 0
    overflow: int = 0
    notifications: int = 0
    max_queue: int = 0
    queued: int = 0

    def to_json(self) -> dict[str, int]:
        return dict(self.__dict__)


class _Worker:
    def __init__(self, sub: Subscription, deliverer: Deliverer, bound: int) -> None:
        self.sub = sub
        self.deliverer = deliverer
        self.bound = bound
        self.stats = SubscriptionStats()
        self.queue: deque[tuple[int, ChangeEvent]] = deque()
        self.cond = threading.Condition()
        self.stop = threading.Event()
        self.busy = False
        self.last_send = float("-inf")
        self.thread = threading.Thread(target=self._run, name=f"notify-{local_name(sub.id)}", daemon=True)
        self.thread.start()

    def offer(self, batch_id: int, events: list[ChangeEvent]) -> None:
        with self.cond:
            for ev in events:
                if len(self.queue) >= self.bound:
                    self.queue.popleft()
                    self.stats.overflow += 1
                self.queue.append((batch_id, ev))
            self.stats.max_queue = max(self.stats.max_queue, len(self.queue))
            self.cond.notify()

    def _take(self) -> list[ChangeEvent] | None:
        with self.cond:
            while not self.queue and not self.stop.is_set():
                self.cond.wait()
            if self.stop.is_set():
                return None
            throttle = (self.sub.throttling_ms or 0) / 1000.0
            if throttle > 0:
                wait = self.last_send + throttle - time.monotonic()
                while wait > 0 and not self.stop.is_set():
                    self.cond.wait(wait)
                    wait = self.last_send + throttle - time.monotonic()
                if self.stop.is_set():
                    return None
                taken = [ev for _, ev in self.queue]
                self.queue.clear()
            else:
                taken = self._take_batches()
            self.busy = True
            return taken

    def _take_batches(self) -> list[ChangeEvent]:
        """Pop the oldest commit batch plus any backlog batches on entities not yet taken.

        Under load this packs several commits into one message without ever
        merging two values of the same entity, so no event is coalesced away
        and per-entity order is kept. Caller holds the condition lock.
        """
        taken: list[ChangeEvent] = []
        entities: set[str] = set()
        while self.queue and len(taken) < MAX_BATCH_EVENTS:
            batch_id = self.queue[0][0]
            n = 0
            ids = set()
            for bid, ev in self.queue:
                if bid != batch_id:
                    break
                ids.add(ev.entity_id)
                n += 1
            if taken and ids & entities:
                break
            entities |= ids
            taken.extend(self.queue.popleft()[1] for _ in range(n))
        return taken

    def _run(self) -> None:
        while True:
            events = self._take()
            if events is None:
                return
            try:
                notification = build_notification(self.sub.id, events)
                self.last_send = time.monotonic()
                result = self.deliverer.deliver(notification, self.sub.target, self.stop)
                self.stats.notifications += 1
                if result == OK:
                    self.stats.delivered += 1
                else:
                    self.stats.dropped += 1
            except Exception:
                log.exception("notification worker for %s failed", self.sub.id)
            finally:
                with self.cond:
                    self.busy = False
                    self.cond.notify_all()

    def idle(self) -> bool:
        with self.cond:
            return not self.queue and not self.busy

    def shutdown(self, drain_timeout: float = 0.0) -> None:
        deadline = time.monotonic() + drain_timeout
        while drain_timeout > 0 and time.monotonic() < deadline and not self.idle():
            time.sleep(0.01)
        with self.cond:
            self.stop.set()
            self.queue.clear()
            self.cond.notify_all()
        self.thread.join(timeout=max(0.1, deadline - time.monotonic()) + 1.0)


class Dispatcher:
    """Subscription registry fed by the store's committed change batches."""

    def __init__(self, deliverer: Deliverer | None = None, queue_bound: int = DEFAULT_QUEUE_BOUND) -> None:
        self.deliverer = deliverer or Deliverer()
        self.queue_bound = queue_bound
        self._subs: dict[str, dict[str, _Worker]] = {}
        self._lock = threading.Lock()

    def create_subscription(self, sub: Subscription) -> str:
        sub.check()
        with self._lock:
            tenant_subs = self._subs.setdefault(sub.tenant, {})
            if sub.id in tenant_subs:
                raise AlreadyExists(f"subscription {sub.id} already exists")
            tenant_subs[sub.id] = _Worker(sub, self.deliverer, self.queue_bound)
        log.info("subscription %s registered for tenant %r", sub.id, sub.tenant)
        return sub.id

    def delete_subscription(self, tenant: str, sub_id: str) -> None:
        with self._lock:
            worker = self._subs.get(tenant, {}).pop(sub_id, None)
        if worker is None:
            raise NotFound(f"subscription {sub_id} not found")
        worker.shutdown()

    def get_subscription(self, tenant: str, sub_id: str) -> Subscription:
        worker = self._subs.get(tenant, {}).get(sub_id)
        if worker is None:
            raise NotFound(f"subscription {sub_id} not found")
        return worker.sub

    def subscriptions(self, tenant: str) -> list[Subscription]:
        return [w.sub for w in list(self._subs.get(tenant, {}).values())]

    def stats(self, tenant: str, sub_id: str) -> SubscriptionStats:
        worker = self._subs.get(tenant, {}).get(sub_id)
        if worker is None:
            raise NotFound(f"subscription {sub_id} not found")
        with worker.cond:
            worker.stats.queued = len(worker.queue) + int(worker.busy)
        return worker.stats

    def on_events(self, events: list[ChangeEvent]) -> None:
        """Store listener: route one committed batch to every matching subscription queue."""
        if not events:
            return
        workers = list(self._subs.get(events[0].tenant, {}).values())
        batch_id = events[0].seq
        for worker in workers:
            matched = [ev for ev in events if subscription_matches(ev, worker.sub)]
            if matched:
                worker.offer(batch_id, matched)

    def drain(self, timeout: float = 5.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if all(w.idle() for subs in list(self._subs.values()) for w in list(subs.values())):
                return True
            time.sleep(0.01)
        return False

    def close(self, drain_timeout: float = 5.0) -> None:
        self.drain(drain_timeout)
        with self._lock:
            workers = [w for subs in self._subs.values() for w in subs.values()]
            self._subs.clear()
        for w in workers:
            w.shutdown()
        self.deliverer.close()
