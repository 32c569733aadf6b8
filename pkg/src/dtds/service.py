"""The DTDS service object: one store, its subscriptions, federation and assets."""

from __future__ import annotations

import logging
import tempfile
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from dtds.assets import AssetRepository, DEFAULT_MAX_BYTES
from dtds.errors import InvalidTarget
from dtds.federation import Federation
from dtds.model import local_name
from dtds.notify import DEFAULT_QUEUE_BOUND, Deliverer, Dispatcher, MqttTarget, Subscription
from dtds.ontology import ACM_PAYLOAD_FORMAT, ValidationReport
from dtds.scene import (
    ClientCapabilities,
    ResolvedScene,
    default_scene_topic,
    load_scene,
    resolve_scene,
    validate_scene,
    watch_membership,
)
from dtds.store import DEFAULT_PAGE_SIZE, ContextStore

log = logging.getLogger(__name__)


@dataclass
class ServiceConfig:
    data_dir: str | None = None
    base_uri: str = "http://localhost:8080"
    default_broker: str | None = None
    page_size: int = DEFAULT_PAGE_SIZE
    queue_bound: int = DEFAULT_QUEUE_BOUND
    max_asset_bytes: int = DEFAULT_MAX_BYTES
    persist: bool = True


class DTDS:
    def __init__(self, config: ServiceConfig | None = None, deliverer: Deliverer | None = None) -> None:
        self.config = config or ServiceConfig()
        data_dir = Path(self.config.data_dir) if self.config.data_dir else Path(tempfile.mkdtemp(prefix="dtds-"))
        self.data_dir = data_dir
        log_path = data_dir / "changes.ndjson" if self.config.persist else None
        self.store = ContextStore(log_path=log_path, page_size=self.config.page_size)
        self.dispatcher = Dispatcher(deliverer, queue_bound=self.config.queue_bound)
        self.store.add_listener(self.dispatcher.on_events)
        self.federation = Federation(self.store)
        self.assets = AssetRepository(data_dir / "repository", max_bytes=self.config.max_asset_bytes)
        self._pool = ThreadPoolExecutor(max_workers=16, thread_name_prefix="resolve")

    def resolve_scene(self, tenant: str, scene_id: str, caps: ClientCapabilities = ClientCapabilities()) -> ResolvedScene:
        return resolve_scene(self.store, self.federation, tenant, scene_id, caps, pool=self._pool)

    def validate_scene(self, tenant: str, scene_id: str) -> ValidationReport:
        return validate_scene(self.store, tenant, scene_id)

    def watch_scene(
        self, tenant: str, scene_id: str, endpoint: str | None = None, topic: str | None = None, qos: int = 0
    ) -> tuple[str, dict[str, Any]]:
        """Subscribe an MQTT channel to every member of a scene (membership fixed at watch time)."""
        entities = load_scene(self.store, tenant, scene_id)
        endpoint = endpoint or self.config.default_broker
        if not endpoint:
            raise InvalidTarget("no MQTT endpoint given and no default broker configured", reason="NO_ENDPOINT")
        ids, attrs = watch_membership(entities)
        sub_id = f"urn:ngsi-ld:Subscription:watch-{local_name(scene_id)}-{uuid.uuid4().hex[:8]}"
        target = MqttTarget(endpoint, topic or default_scene_topic(tenant, scene_id), qos)
        sub = Subscription(sub_id, tenant, target, watched_ids=frozenset(ids), watched_attributes=frozenset(attrs))
        self.dispatcher.create_subscription(sub)
        acm = {
            "protocol": "mqtt",
            "endpoint": target.endpoint,
            "topic": target.topic,
            "qos": target.qos,
            "payloadFormat": ACM_PAYLOAD_FORMAT,
        }
        return sub_id, acm

    def close(self, drain_timeout: float = 5.0) -> None:
        self.dispatcher.close(drain_timeout)
        self.federation.close()
        self._pool.shutdown(wait=False, cancel_futures=True)
        self.store.close()
