"""Scene resolution: the fused, client-filtered view of one descriptor graph."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any

from dtds.assets import render_access_url
from dtds.errors import DTDSError, MalformedTemplate, NotFound, SceneInvalid, SceneNotFound, UnknownMethod
from dtds.federation import Federation
from dtds.model import Entity, format_timestamp, local_name, utcnow
from dtds.ontology import (
    ACM,
    ACM_PAYLOAD_FORMAT,
    ASSET_REPOSITORY,
    ASSET_TYPES,
    CONTEXT_REF,
    DYNAMIC_ASSET,
    REPRESENTATION_REF,
    SCENE_HEAD,
    ValidationReport,
    asset_edges,
    reachable_assets,
    scene_closure,
    validate_scene_graph,
)
from dtds.store import ContextStore

log = logging.getLogger(__name__)

# dangling representation links degrade to warnings instead of blocking resolution
DEGRADABLE = frozenset({"RR_UNRESOLVED", "REPO_UNRESOLVED"})
SNAPSHOT_BUDGET = 0.5
SNAPSHOT_SOURCE_CAP = 0.25


@dataclass(frozen=True)
class ClientCapabilities:
    formats: frozenset[str] | None = None
    modalities: frozenset[str] | None = None

    @classmethod
    def parse(cls, formats: str | None = None, modalities: str | None = None) -> ClientCapabilities:
        def split(text):
            if text is None:
                return None
            return frozenset(t.strip().lower() for t in text.split(",") if t.strip())

        return cls(split(formats), split(modalities))

    def accepts(self, fmt: Any, modality: Any) -> bool:
        if self.formats is not None and str(fmt).lower() not in self.formats:
            return False
        if self.modalities is not None and str(modality).lower() not in self.modalities:
            return False
        return True


@dataclass
class ResolvedScene:
    scene_id: str
    resolved_at: datetime
    name: str | None
    assets: list[dict[str, Any]]
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "sceneId": self.scene_id,
            "name": self.name,
            "resolvedAt": format_timestamp(self.resolved_at),
            "assets": self.assets,
            "warnings": self.warnings,
        }

    def walk(self):
        stack = list(self.assets)
        while stack:
            node = stack.pop()
            yield node
            stack.extend(node["children"])


def acm_descriptor(acm: Entity) -> dict[str, Any]:
    return {
        "id": acm.id,
        "protocol": acm.value("protocol", "mqtt"),
        "endpoint": acm.value("endpoint"),
        "topic": acm.value("topic"),
        "qos": acm.value("qos", 0),
        "payloadFormat": acm.value("payloadFormat", ACM_PAYLOAD_FORMAT),
    }


def load_scene(store: ContextStore, tenant: str, scene_id: str) -> dict[str, Entity]:
    def lookup(eid: str) -> Entity | None:
        try:
            return store.get_entity(tenant, eid)
        except NotFound:
            return None

    head = lookup(scene_id)
    if head is None or head.type != SCENE_HEAD:
        raise SceneNotFound(f"scene {scene_id} not found")
    return scene_closure(scene_id, lookup)


def validate_scene(store: ContextStore, tenant: str, scene_id: str) -> ValidationReport:
    return validate_scene_graph(scene_id, load_scene(store, tenant, scene_id))


def _pose(e: Entity) -> dict[str, Any]:
    pose: dict[str, Any] = {}
    position = e.get("position")
    if position is not None and position.point() is not None:
        p = position.point()
        pose["position"] = [p.lon, p.lat, p.alt]
        if position.observed_at is not None:
            pose["observedAt"] = format_timestamp(position.observed_at)
    orientation = (e.value("pose") or {}).get("orientation") if isinstance(e.value("pose"), dict) else None
    if orientation is not None:
        pose["orientation"] = orientation
    return pose


def _representations(e: Entity, entities: dict[str, Entity], caps: ClientCapabilities, warnings: list[str]):
    out = []
    for rr_id in e.targets("hasRepresentation"):
        rr = entities.get(rr_id)
        if rr is None or rr.type != REPRESENTATION_REF:
            warnings.append(f"RR_UNRESOLVED:{rr_id}")
            continue
        repo_ids = rr.targets("inRepository")
        repo = entities.get(repo_ids[0]) if repo_ids else None
        if repo is None or repo.type != ASSET_REPOSITORY:
            warnings.append(f"RR_UNRESOLVED:{rr_id}")
            continue
        if not caps.accepts(rr.value("format"), rr.value("modality")):
            continue
        urls = {}
        for method in repo.value("accessMethods") or []:
            try:
                urls[method["name"]] = render_access_url(repo, method["name"], rr.value("resourceId"))
            except (UnknownMethod, MalformedTemplate) as exc:
                warnings.append(f"ACCESS_METHOD_SKIPPED:{repo.id}:{method.get('name')}")
                log.debug("skipping access method: %s", exc)
        entry: dict[str, Any] = {
            "id": rr.id,
            "modality": rr.value("modality"),
            "format": rr.value("format"),
            "resourceId": rr.value("resourceId"),
            "repository": repo.id,
            "fetchUrls": urls,
        }
        if "lod" in rr.attrs:
            entry["lod"] = rr.value("lod")
        if "sizeBytes" in rr.attrs:
            entry["sizeBytes"] = rr.value("sizeBytes")
        out.append(entry)
    return out


def _channels(e: Entity, entities: dict[str, Entity]) -> list[dict[str, Any]]:
    return [acm_descriptor(entities[a]) for a in e.targets("syncChannel") if a in entities and entities[a].type == ACM]


def resolve_scene(
    store: ContextStore,
    federation: Federation | None,
    tenant: str,
    scene_id: str,
    caps: ClientCapabilities = ClientCapabilities(),
    snapshot_budget: float = SNAPSHOT_BUDGET,
    source_cap: float = SNAPSHOT_SOURCE_CAP,
    pool: ThreadPoolExecutor | None = None,
) -> ResolvedScene:
    entities = load_scene(store, tenant, scene_id)
    report = validate_scene_graph(scene_id, entities)
    blocking = [f for f in report.errors if f.code not in DEGRADABLE]
    if blocking:
        raise SceneInvalid(f"scene {scene_id} has {len(blocking)} blocking errors", blocking)
    warnings = [f"{f.code}:{f.entity_id}" for f in report.warnings]

    nodes = reachable_assets(scene_id, entities)
    children: dict[str, list[str]] = {n: [] for n in nodes}
    has_parent = set()
    for parent, child in sorted(asset_edges(entities)):
        if parent in nodes and child in nodes:
            children[parent].append(child)
            has_parent.add(child)

    # context snapshots are fetched concurrently and bounded by one overall budget
    sources = sorted(
        {
            src
            for n in nodes
            for cr in entities[n].targets("hasContextRef")
            if cr in entities and entities[cr].type == CONTEXT_REF
            for src in entities[cr].targets("sourceEntity")
        }
    )
    snapshots: dict[str, Entity] = {}
    if sources:
        own_pool = pool is None
        pool = pool or ThreadPoolExecutor(max_workers=min(16, len(sources)))

        def fetch(src: str) -> tuple[Entity | None, list[str]]:
            if federation is None:
                try:
                    return store.get_entity(tenant, src), []
                except NotFound:
                    return None, []
            result = federation.federated_get(tenant, src, timeout_cap=source_cap)
            return result.value, result.warnings

        futures = {pool.submit(fetch, s): s for s in sources}
        done, pending = wait(futures, timeout=snapshot_budget)
        for fut in done:
            try:
                entity, source_warnings = fut.result()
            except DTDSError as exc:
                warnings.append(f"SNAPSHOT_UNAVAILABLE:{futures[fut]}")
                log.debug("snapshot of %s unavailable: %s", futures[fut], exc)
                continue
            warnings.extend(source_warnings)
            if entity is not None:
                snapshots[futures[fut]] = entity
            else:
                warnings.append(f"SNAPSHOT_UNAVAILABLE:{futures[fut]}")
        for fut in pending:
            warnings.append(f"SNAPSHOT_TIMEOUT:{futures[fut]}")
        if own_pool:
            pool.shutdown(wait=False, cancel_futures=True)

    def build(eid: str) -> dict[str, Any]:
        e = entities[eid]
        bindings = []
        for cr_id in e.targets("hasContextRef"):
            cr = entities.get(cr_id)
            if cr is None:
                continue
            source = (cr.targets("sourceEntity") or [None])[0]
            amap = cr.value("attributeMap") or {}
            for local_attr in sorted(amap):
                binding: dict[str, Any] = {
                    "contextReference": cr.id,
                    "localAttr": local_attr,
                    "sourceEntity": source,
                    "remoteAttr": amap[local_attr],
                    "channels": _channels(cr, entities),
                }
                if cr.value("metadata") is not None:
                    binding["metadata"] = cr.value("metadata")
                snap = snapshots.get(source)
                if snap is not None and amap[local_attr] in snap.attrs:
                    binding["snapshot"] = snap.attrs[amap[local_attr]].to_json()
                bindings.append(binding)
        return {
            "entityId": eid,
            "kind": "dynamic" if e.type == DYNAMIC_ASSET else "static",
            "pose": _pose(e),
            "representations": _representations(e, entities, caps, warnings),
            "contextBindings": bindings,
            "channels": _channels(e, entities),
            "children": [build(c) for c in children[eid]],
        }

    roots = sorted(n for n in nodes if n not in has_parent)
    assets = [build(r) for r in roots]
    head = entities[scene_id]
    return ResolvedScene(scene_id, utcnow(), head.value("name"), assets, sorted(set(warnings)))


def watch_membership(entities: dict[str, Entity]) -> tuple[set[str], set[str]]:
    """Entity ids and attribute names a scene watch subscribes to."""
    ids = set(entities)
    attrs = {"position", "pose"}
    for e in entities.values():
        if e.type == CONTEXT_REF:
            ids.update(e.targets("sourceEntity"))
            attrs.update((e.value("attributeMap") or {}).keys())
    return ids, attrs


def default_scene_topic(tenant: str, scene_id: str) -> str:
    return f"dtds/{tenant}/scene/{local_name(scene_id)}"


def scene_assets(entities: dict[str, Entity]) -> list[Entity]:
    return [e for e in entities.values() if e.type in ASSET_TYPES]
