"""Descriptor ontology: per-kind entity rules and scene-graph validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping
from urllib.parse import urlparse

from dtds.errors import SceneHeadMissing
from dtds.model import GEOPROPERTY, PROPERTY, RELATIONSHIP, Entity, is_entity_id

SCENE_HEAD = "SceneHead"
STATIC_ASSET = "StaticAsset"
DYNAMIC_ASSET = "DynamicAsset"
REPRESENTATION_REF = "RepresentationReference"
CONTEXT_REF = "ContextReference"
ACM = "ACM"
ASSET_REPOSITORY = "AssetRepositoryDescriptor"

ASSET_TYPES = frozenset({STATIC_ASSET, DYNAMIC_ASSET})
DTDO_TYPES = frozenset(
    {SCENE_HEAD, STATIC_ASSET, DYNAMIC_ASSET, REPRESENTATION_REF, CONTEXT_REF, ACM, ASSET_REPOSITORY}
)
MODALITIES = frozenset({"mesh", "pointcloud", "gaussian-splat", "tiles", "other"})
FIRST_ORDER_ATTRS = frozenset({"pose", "position", "orientation"})
ACM_PAYLOAD_FORMAT = "ngsi-ld-notification-json"
TEMPLATE_PLACEHOLDER = "{resourceId}"

# relationship name -> (allowed target types, unresolved-target code)
ASSET_LINKS: dict[str, tuple[frozenset[str], str]] = {
    "parentAsset": (ASSET_TYPES, "ASSET_UNRESOLVED"),
    "childAsset": (ASSET_TYPES, "ASSET_UNRESOLVED"),
    "hasRepresentation": (frozenset({REPRESENTATION_REF}), "RR_UNRESOLVED"),
    "hasContextRef": (frozenset({CONTEXT_REF}), "CR_UNRESOLVED"),
    "syncChannel": (frozenset({ACM}), "ACM_UNRESOLVED"),
}
LINKS_BY_TYPE: dict[str, dict[str, tuple[frozenset[str], str]]] = {
    SCENE_HEAD: {"hasAsset": (ASSET_TYPES, "ASSET_UNRESOLVED")},
    STATIC_ASSET: ASSET_LINKS,
    DYNAMIC_ASSET: ASSET_LINKS,
    REPRESENTATION_REF: {"inRepository": (frozenset({ASSET_REPOSITORY}), "REPO_UNRESOLVED")},
    CONTEXT_REF: {"syncChannel": (frozenset({ACM}), "ACM_UNRESOLVED")},
}


@dataclass(frozen=True)
class Finding:
    severity: str
    code: str
    entity_id: str
    message: str

    def to_json(self) -> dict[str, str]:
        return {"severity": self.severity, "code": self.code, "entityId": self.entity_id, "message": self.message}


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.errors

    @property
    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "error"]

    @property
    def warnings(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "warning"]

    def codes(self) -> set[str]:
        return {f.code for f in self.findings}

    def error(self, code: str, entity_id: str, message: str) -> None:
        self.findings.append(Finding("error", code, entity_id, message))

    def warning(self, code: str, entity_id: str, message: str) -> None:
        self.findings.append(Finding("warning", code, entity_id, message))

    def extend(self, other: ValidationReport) -> None:
        self.findings.extend(other.findings)

    def to_json(self) -> dict[str, Any]:
        return {
            "valid": self.valid,
            "errors": len(self.errors),
            "warnings": len(self.warnings),
            "findings": [f.to_json() for f in self.findings],
        }


def _num(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _nonempty_str(x: Any) -> bool:
    return isinstance(x, str) and bool(x)


def _check_links(entity: Entity, report: ValidationReport) -> None:
    for name in LINKS_BY_TYPE.get(entity.type, {}):
        attr = entity.get(name)
        if attr is not None and attr.kind != RELATIONSHIP:
            report.error("REL_KIND", entity.id, f"{name} must be a Relationship")


def _check_scene_head(e: Entity, report: ValidationReport) -> None:
    if not _nonempty_str(e.value("name")):
        report.error("SH_NO_NAME", e.id, "SceneHead needs a string name Property")
    origin_attr = e.get("areaOrigin")
    origin = origin_attr.point() if origin_attr is not None else None
    if origin is None:
        report.error("SH_NO_ORIGIN", e.id, "SceneHead needs an areaOrigin GeoProperty")
    bounds = e.value("areaBounds")
    ok_bounds = (
        isinstance(bounds, list)
        and len(bounds) == 4
        and all(map(_num, bounds))
        and -180 <= bounds[0] <= bounds[2] <= 180
        and -90 <= bounds[1] <= bounds[3] <= 90
    )
    if not ok_bounds:
        report.error("SH_BAD_BOUNDS", e.id, f"areaBounds must be [minLon, minLat, maxLon, maxLat], got {bounds!r}")
    elif origin is not None:
        if not (bounds[0] <= origin.lon <= bounds[2] and bounds[1] <= origin.lat <= bounds[3]):
            report.error("SH_ORIGIN_OUT_OF_BOUNDS", e.id, "areaOrigin lies outside areaBounds")


def _check_orientation(e: Entity, report: ValidationReport) -> None:
    pose = e.get("pose")
    if pose is None:
        return
    value = pose.value
    if pose.kind != PROPERTY or not isinstance(value, dict):
        report.error("ASSET_BAD_POSE", e.id, "pose must be a Property holding a map")
        return
    orientation = value.get("orientation")
    if orientation is None:
        return
    if not isinstance(orientation, dict) or not all(_num(orientation.get(k)) for k in ("roll", "pitch", "yaw")):
        report.error("ASSET_BAD_POSE", e.id, "orientation needs finite roll, pitch and yaw")
    elif not -180.0 <= orientation["yaw"] < 180.0:
        report.error("ASSET_BAD_POSE", e.id, f"yaw {orientation['yaw']} not normalized to [-180, 180)")
    if e.type == DYNAMIC_ASSET and pose.observed_at is None:
        report.error("DA_POSE_NO_OBSERVED_AT", e.id, "DynamicAsset pose needs observedAt")


def _check_asset(e: Entity, report: ValidationReport) -> None:
    position = e.get("position")
    if position is not None and position.kind != GEOPROPERTY:
        report.error("ASSET_BAD_POSITION", e.id, "position must be a GeoProperty")
    if e.type == DYNAMIC_ASSET:
        if position is None or position.kind != GEOPROPERTY:
            report.error("DA_NO_POSITION", e.id, "DynamicAsset needs a position GeoProperty")
        elif position.observed_at is None:
            report.error("DA_POSITION_NO_OBSERVED_AT", e.id, "DynamicAsset position needs observedAt")
    else:
        if "hasContextRef" in e.attrs:
            report.error("SA_CONTEXT_REF", e.id, "only DynamicAssets may carry hasContextRef")
        if "syncChannel" in e.attrs:
            report.error("SA_SYNC_CHANNEL", e.id, "only DynamicAssets may carry syncChannel")
    _check_orientation(e, report)
    parent = e.get("parentAsset")
    if parent is not None and parent.kind == RELATIONSHIP and len(parent.targets()) != 1:
        report.error("ASSET_BAD_PARENT", e.id, "parentAsset must reference exactly one asset")


def _check_rr(e: Entity, report: ValidationReport) -> None:
    if e.value("modality") not in MODALITIES:
        report.error("RR_BAD_MODALITY", e.id, f"modality must be one of {sorted(MODALITIES)}")
    if not _nonempty_str(e.value("format")):
        report.error("RR_NO_FORMAT", e.id, "format tag missing")
    if not e.targets("inRepository"):
        report.error("RR_NO_REPOSITORY", e.id, "inRepository Relationship missing")
    if not _nonempty_str(e.value("resourceId")):
        report.error("RR_NO_RESOURCE_ID", e.id, "resourceId missing")
    lod = e.value("lod")
    if "lod" in e.attrs and not (isinstance(lod, int) and not isinstance(lod, bool) and lod >= 0):
        report.error("RR_BAD_LOD", e.id, "lod must be an integer >= 0")
    size = e.value("sizeBytes")
    if "sizeBytes" in e.attrs and not (isinstance(size, int) and not isinstance(size, bool) and size >= 0):
        report.error("RR_BAD_SIZE", e.id, "sizeBytes must be an integer >= 0")


def _check_cr(e: Entity, report: ValidationReport) -> None:
    if not e.targets("sourceEntity"):
        report.error("CR_NO_SOURCE", e.id, "sourceEntity Relationship missing")
    amap = e.value("attributeMap")
    if not isinstance(amap, dict) or not amap:
        report.error("CR_EMPTY_ATTRIBUTE_MAP", e.id, "attributeMap must be a non-empty map")
    else:
        if not all(_nonempty_str(k) and _nonempty_str(v) for k, v in amap.items()):
            report.error("CR_BAD_ATTRIBUTE_MAP", e.id, "attributeMap must map names to names")
        clash = sorted(FIRST_ORDER_ATTRS & set(amap))
        if clash:
            report.error("CR_RESERVED_LOCAL_ATTR", e.id, f"local names {clash} collide with first-order attributes")
    if "metadata" in e.attrs and not isinstance(e.value("metadata"), dict):
        report.error("CR_BAD_METADATA", e.id, "metadata must be a map")


def _check_acm(e: Entity, report: ValidationReport) -> None:
    if e.value("protocol") != "mqtt":
        report.error("ACM_BAD_PROTOCOL", e.id, "protocol must be 'mqtt'")
    endpoint = e.value("endpoint")
    if not mqtt_endpoint_ok(endpoint):
        report.error("ACM_BAD_ENDPOINT", e.id, f"endpoint must be mqtt://host:port, got {endpoint!r}")
    if "topic" in e.attrs:
        topic = e.value("topic")
        if not _nonempty_str(topic):
            report.error("ACM_BAD_TOPIC", e.id, "topic must be a non-empty string")
        elif "+" in topic or "#" in topic:
            report.error("ACM_WILDCARD_TOPIC", e.id, f"topic {topic!r} contains MQTT wildcards")
    qos = e.value("qos")
    if "qos" in e.attrs and (isinstance(qos, bool) or qos not in (0, 1)):
        report.error("ACM_BAD_QOS", e.id, "qos must be 0 or 1")
    if "payloadFormat" in e.attrs and e.value("payloadFormat") != ACM_PAYLOAD_FORMAT:
        report.error("ACM_BAD_PAYLOAD_FORMAT", e.id, f"payloadFormat must be {ACM_PAYLOAD_FORMAT!r}")


def _check_repository(e: Entity, report: ValidationReport) -> None:
    base = e.value("baseUri")
    if not _nonempty_str(base) or urlparse(base).scheme not in ("http", "https"):
        report.error("REPO_NO_BASE_URI", e.id, "baseUri must be an http(s) URI")
    methods = e.value("accessMethods")
    if not isinstance(methods, list) or not methods:
        report.error("REPO_NO_ACCESS_METHODS", e.id, "at least one access method required")
        return
    seen: set[str] = set()
    for m in methods:
        if not isinstance(m, dict) or not _nonempty_str(m.get("name")) or not _nonempty_str(m.get("kind")):
            report.error("REPO_BAD_METHOD", e.id, f"access method {m!r} needs name and kind")
            continue
        if m["name"] in seen:
            report.error("REPO_DUPLICATE_METHOD", e.id, f"duplicate access method {m['name']!r}")
        seen.add(m["name"])
        if m["kind"] == "http-get-template":
            template = m.get("urlTemplate")
            if not isinstance(template, str) or template.count(TEMPLATE_PLACEHOLDER) != 1:
                report.error("REPO_BAD_TEMPLATE", e.id, f"template of {m['name']!r} needs exactly one {{resourceId}}")
        elif m["kind"] != "internal":
            report.warning("REPO_UNKNOWN_METHOD_KIND", e.id, f"access method kind {m['kind']!r} is not rendered")


def mqtt_endpoint_ok(endpoint: Any) -> bool:
    if not _nonempty_str(endpoint):
        return False
    try:
        parsed = urlparse(endpoint)
        return parsed.scheme == "mqtt" and bool(parsed.hostname) and parsed.port is not None
    except ValueError:
        return False


_CHECKS = {
    SCENE_HEAD: _check_scene_head,
    STATIC_ASSET: _check_asset,
    DYNAMIC_ASSET: _check_asset,
    REPRESENTATION_REF: _check_rr,
    CONTEXT_REF: _check_cr,
    ACM: _check_acm,
    ASSET_REPOSITORY: _check_repository,
}


def validate_entity(entity: Entity) -> ValidationReport:
    """Per-kind rules; entities outside the descriptor vocabulary pass untouched."""
    report = ValidationReport()
    if not is_entity_id(entity.id):
        report.error("ENTITY_ID_MALFORMED", entity.id, "id must look like urn:ngsi-ld:<Type>:<name>")
    check = _CHECKS.get(entity.type)
    if check is not None:
        _check_links(entity, report)
        check(entity, report)
    return report


def asset_edges(entities: Mapping[str, Entity]) -> set[tuple[str, str]]:
    """Parent -> child edges among assets, from childAsset lists and parentAsset links."""
    edges = set()
    for e in entities.values():
        if e.type not in ASSET_TYPES:
            continue
        for child in e.targets("childAsset"):
            if child in entities and entities[child].type in ASSET_TYPES:
                edges.add((e.id, child))
        for parent in e.targets("parentAsset"):
            if parent in entities and entities[parent].type in ASSET_TYPES:
                edges.add((parent, e.id))
    return edges


def _find_cycles(nodes: Iterable[str], edges: set[tuple[str, str]]) -> list[str]:
    """Return one node per back edge found by an iterative colored DFS."""
    adjacency: dict[str, list[str]] = {}
    for a, b in sorted(edges):
        adjacency.setdefault(a, []).append(b)
    color: dict[str, int] = {}
    on_cycle = []
    for root in sorted(nodes):
        if color.get(root):
            continue
        color[root] = 1
        stack = [(root, iter(adjacency.get(root, ())))]
        while stack:
            node, children = stack[-1]
            for child in children:
                state = color.get(child, 0)
                if state == 1:
                    on_cycle.append(child)
                elif state == 0:
                    color[child] = 1
                    stack.append((child, iter(adjacency.get(child, ()))))
                    break
            else:
                color[node] = 2
                stack.pop()
    return on_cycle


def validate_scene_graph(scene_id: str, entities: Iterable[Entity] | Mapping[str, Entity]) -> ValidationReport:
    """Reference resolution, acyclicity, kind and symmetry checks over one scene's entity set."""
    by_id = dict(entities) if isinstance(entities, Mapping) else {e.id: e for e in entities}
    head = by_id.get(scene_id)
    if head is None or head.type != SCENE_HEAD:
        raise SceneHeadMissing(f"{scene_id} is not a SceneHead in the given set")

    report = ValidationReport()
    for eid in sorted(by_id):
        e = by_id[eid]
        report.extend(validate_entity(e))
        for name, (allowed, missing_code) in LINKS_BY_TYPE.get(e.type, {}).items():
            for target in e.targets(name):
                other = by_id.get(target)
                if other is None:
                    report.error(missing_code, e.id, f"{name} target {target} not found")
                elif other.type not in allowed:
                    if name in ("parentAsset", "childAsset") and other.type in ASSET_TYPES:
                        report.error("KIND_MISMATCH", e.id, f"{name} {target} is a {other.type}, expected {e.type}")
                    else:
                        report.error("WRONG_TARGET_TYPE", e.id, f"{name} {target} has type {other.type}")
                elif name in ("parentAsset", "childAsset") and other.type != e.type:
                    report.error("KIND_MISMATCH", e.id, f"{name} {target} is a {other.type}, expected {e.type}")
        if e.type == CONTEXT_REF:
            for source in e.targets("sourceEntity"):
                if source not in by_id:
                    report.warning("SOURCE_UNRESOLVED", e.id, f"sourceEntity {source} not local (may be remote)")

    assets = {eid: e for eid, e in by_id.items() if e.type in ASSET_TYPES}
    for node in _find_cycles(assets, asset_edges(by_id)):
        report.error("SCENE_CYCLE", node, "parent/child links form a cycle")

    parents: dict[str, set[str]] = {}
    for eid in sorted(assets):
        for child in assets[eid].targets("childAsset"):
            if child not in assets:
                continue
            parents.setdefault(child, set()).add(eid)
            declared = assets[child].targets("parentAsset")
            if declared and declared != [eid]:
                report.error("PARENT_CHILD_ASYMMETRY", child, f"listed as child of {eid} but parentAsset is {declared}")
    for child, ps in sorted(parents.items()):
        if len(ps) > 1:
            report.error("MULTIPLE_PARENTS", child, f"listed as child by {sorted(ps)}")
    return report


def reachable_assets(scene_id: str, entities: Mapping[str, Entity]) -> set[str]:
    """Assets reachable from the head over hasAsset and childAsset edges."""
    head = entities[scene_id]
    seen: set[str] = set()
    frontier = [t for t in head.targets("hasAsset") if t in entities and entities[t].type in ASSET_TYPES]
    while frontier:
        node = frontier.pop()
        if node in seen:
            continue
        seen.add(node)
        for child in entities[node].targets("childAsset"):
            if child in entities and entities[child].type in ASSET_TYPES:
                frontier.append(child)
    return seen


def scene_closure(scene_id: str, lookup) -> dict[str, Entity]:
    """Collect every entity linked from a head, using ``lookup(id) -> Entity | None``.

    Follows all descriptor relationships except ContextReference sourceEntity,
    which points at context state rather than at descriptor members.
    """
    found: dict[str, Entity] = {}
    frontier = [scene_id]
    while frontier:
        eid = frontier.pop()
        if eid in found:
            continue
        e = lookup(eid)
        if e is None:
            continue
        found[eid] = e
        for name in LINKS_BY_TYPE.get(e.type, {}):
            frontier.extend(t for t in e.targets(name) if t not in found)
    return found
