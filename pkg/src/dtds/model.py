"""Entity data model and the NGSI-LD normalized wire format.

An :class:`Entity` is the universal carrier for descriptor and context state.
Attributes are typed as ``Property``, ``GeoProperty`` or ``Relationship``;
geo points travel as GeoJSON ``Point`` values with ``[lon, lat, alt]``
coordinates and timestamps as RFC 3339 UTC strings with millisecond precision.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Any, Iterable, NamedTuple

from dtds.errors import IdMismatch, InvalidAttribute, MalformedDocument, MissingIdOrType

PROPERTY = "Property"
RELATIONSHIP = "Relationship"
GEOPROPERTY = "GeoProperty"
ATTRIBUTE_KINDS = (PROPERTY, RELATIONSHIP, GEOPROPERTY)

RESERVED_NAMES = frozenset({"id", "type"})
_ATTR_KEYS = frozenset({"type", "value", "object", "observedAt", "unitCode"})


class GeoPosition(NamedTuple):
    lat: float
    lon: float
    alt: float = 0.0


# -- timestamps ---------------------------------------------------------------


def utcnow() -> datetime:
    """Current UTC time truncated to millisecond precision."""
    return truncate_ms(datetime.now(timezone.utc))


def truncate_ms(ts: datetime) -> datetime:
    return ts.replace(microsecond=ts.microsecond - ts.microsecond % 1000)


def parse_timestamp(text: str) -> datetime:
    if not isinstance(text, str) or not text:
        raise InvalidAttribute(f"timestamp must be a non-empty string, got {text!r}")
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    # fromisoformat on 3.10 only accepts 3 or 6 fractional digits
    if "." in raw:
        head, _, rest = raw.partition(".")
        digits = ""
        while rest and rest[0].isdigit():
            digits, rest = digits + rest[0], rest[1:]
        raw = f"{head}.{(digits + '000000')[:6]}{rest}"
    try:
        ts = datetime.fromisoformat(raw)
    except ValueError as exc:
        raise InvalidAttribute(f"bad RFC 3339 timestamp {text!r}") from exc
    if ts.tzinfo is None:
        raise InvalidAttribute(f"timestamp {text!r} lacks a UTC offset")
    return truncate_ms(ts.astimezone(timezone.utc))


def format_timestamp(ts: datetime) -> str:
    ts = ts.astimezone(timezone.utc)
    return ts.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ts.microsecond // 1000:03d}Z"


def from_epoch(seconds: float) -> datetime:
    return truncate_ms(datetime.fromtimestamp(seconds, timezone.utc))


# -- attributes ---------------------------------------------------------------


@dataclass(frozen=True)
class Attribute:
    """One typed attribute. Relationships carry ``object``; the rest ``value``."""

    kind: str
    value: Any = None
    object: str | tuple[str, ...] | None = None
    observed_at: datetime | None = None
    unit_code: str | None = None

    def targets(self) -> list[str]:
        if self.kind != RELATIONSHIP or self.object is None:
            return []
        if isinstance(self.object, str):
            return [self.object]
        return list(self.object)

    def point(self) -> GeoPosition | None:
        if self.kind != GEOPROPERTY or not isinstance(self.value, dict):
            return None
        coords = self.value.get("coordinates") or []
        if len(coords) < 2:
            return None
        alt = coords[2] if len(coords) > 2 else 0.0
        return GeoPosition(lat=coords[1], lon=coords[0], alt=alt)

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"type": self.kind}
        if self.kind == RELATIONSHIP:
            doc["object"] = self.object if isinstance(self.object, str) else list(self.object or ())
        else:
            doc["value"] = self.value
        if self.observed_at is not None:
            doc["observedAt"] = format_timestamp(self.observed_at)
        if self.unit_code is not None:
            doc["unitCode"] = self.unit_code
        return doc


def prop(value: Any, observed_at: datetime | None = None, unit_code: str | None = None) -> Attribute:
    return Attribute(PROPERTY, value=value, observed_at=observed_at, unit_code=unit_code)


def rel(target: str | Iterable[str], observed_at: datetime | None = None) -> Attribute:
    obj = target if isinstance(target, str) else tuple(target)
    return Attribute(RELATIONSHIP, object=obj, observed_at=observed_at)


def geo(lon: float, lat: float, alt: float = 0.0, observed_at: datetime | None = None) -> Attribute:
    return Attribute(GEOPROPERTY, value=point_value(lon, lat, alt), observed_at=observed_at)


def point_value(lon: float, lat: float, alt: float = 0.0) -> dict[str, Any]:
    return {"type": "Point", "coordinates": [float(lon) + 0.0, float(lat) + 0.0, float(alt) + 0.0]}


def normalize_yaw(yaw: float) -> float:
    """Map an angle in degrees onto [-180, 180)."""
    out = math.fmod(yaw + 180.0, 360.0)
    if out < 0:
        out += 360.0
    out -= 180.0
    return out if out < 180.0 else -180.0


def _is_number(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _parse_point(value: Any) -> dict[str, Any]:
    if not isinstance(value, dict) or value.get("type") != "Point":
        raise InvalidAttribute("GeoProperty value must be a GeoJSON Point")
    coords = value.get("coordinates")
    if not isinstance(coords, list) or len(coords) not in (2, 3) or not all(map(_is_number, coords)):
        raise InvalidAttribute(f"bad Point coordinates {coords!r}")
    lon, lat = coords[0], coords[1]
    if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
        raise InvalidAttribute(f"Point [{lon}, {lat}] outside lon/lat range")
    return point_value(lon, lat, coords[2] if len(coords) == 3 else 0.0)


def _normalize_pose(value: Any) -> Any:
    if not isinstance(value, dict):
        return value
    orientation = value.get("orientation")
    if isinstance(orientation, dict) and _is_number(orientation.get("yaw")):
        orientation = dict(orientation, yaw=normalize_yaw(orientation["yaw"]))
        value = dict(value, orientation=orientation)
    return value


def parse_attribute(name: str, doc: Any) -> Attribute:
    """Parse one normalized-form attribute document."""
    check_attribute_name(name)
    if not isinstance(doc, dict):
        raise InvalidAttribute(f"attribute {name!r} must be an object")
    unknown = set(doc) - _ATTR_KEYS
    if unknown:
        raise InvalidAttribute(f"attribute {name!r} has unsupported keys {sorted(unknown)}")
    kind = doc.get("type")
    if kind not in ATTRIBUTE_KINDS:
        raise InvalidAttribute(f"attribute {name!r} has unknown type {kind!r}")
    observed = parse_timestamp(doc["observedAt"]) if "observedAt" in doc else None
    unit = doc.get("unitCode")
    if unit is not None and not isinstance(unit, str):
        raise InvalidAttribute(f"attribute {name!r} unitCode must be a string")

    if kind == RELATIONSHIP:
        if "value" in doc or "object" not in doc:
            raise InvalidAttribute(f"Relationship {name!r} needs object and no value")
        obj = doc["object"]
        if isinstance(obj, list):
            if not obj or not all(isinstance(o, str) and o for o in obj):
                raise InvalidAttribute(f"Relationship {name!r} object list must hold URIs")
            obj = tuple(obj)
        elif not isinstance(obj, str) or not obj:
            raise InvalidAttribute(f"Relationship {name!r} object must be a URI")
        return Attribute(kind, object=obj, observed_at=observed, unit_code=unit)

    if "object" in doc or "value" not in doc or doc["value"] is None:
        raise InvalidAttribute(f"{kind} {name!r} needs value and no object")
    value = doc["value"]
    if kind == GEOPROPERTY:
        value = _parse_point(value)
    elif name == "pose":
        value = _normalize_pose(value)
    return Attribute(kind, value=value, observed_at=observed, unit_code=unit)


def check_attribute_name(name: Any) -> None:
    if not isinstance(name, str) or not name:
        raise InvalidAttribute("attribute names must be non-empty strings")
    if name in RESERVED_NAMES or name.startswith("@"):
        raise InvalidAttribute(f"attribute name {name!r} is reserved")


# -- entities -----------------------------------------------------------------


@dataclass
class Entity:
    id: str
    type: str
    attrs: dict[str, Attribute] = field(default_factory=dict)

    def get(self, name: str) -> Attribute | None:
        return self.attrs.get(name)

    def value(self, name: str, default: Any = None) -> Any:
        attr = self.attrs.get(name)
        if attr is None or attr.kind == RELATIONSHIP:
            return default
        return attr.value

    def targets(self, name: str) -> list[str]:
        attr = self.attrs.get(name)
        return attr.targets() if attr is not None else []

    def position(self) -> GeoPosition | None:
        attr = self.attrs.get("position")
        return attr.point() if attr is not None else None

    def with_attrs(self, updates: dict[str, Attribute]) -> Entity:
        return replace(self, attrs={**self.attrs, **updates})

    def copy(self) -> Entity:
        return Entity(self.id, self.type, dict(self.attrs))

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"id": self.id, "type": self.type}
        for name in sorted(self.attrs):
            doc[name] = self.attrs[name].to_json()
        return doc

    @property
    def local_name(self) -> str:
        return local_name(self.id)


def local_name(entity_id: str) -> str:
    """Last colon-separated segment of a URN, e.g. ``car1`` for ``urn:ngsi-ld:DynamicAsset:car1``."""
    return entity_id.rsplit(":", 1)[-1]


def is_entity_id(value: Any) -> bool:
    if not isinstance(value, str) or not value.startswith("urn:"):
        return False
    segments = value[4:].split(":")
    return len(segments) >= 3 and all(segments)


def _reject_constant(name: str) -> Any:
    raise MalformedDocument(f"non-finite number {name} is not valid JSON")


def loads(text: str | bytes) -> Any:
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except (ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, MalformedDocument):
            raise
        raise MalformedDocument(f"invalid JSON: {exc}") from exc


def entity_from_json(doc: Any) -> Entity:
    if not isinstance(doc, dict):
        raise MalformedDocument("entity document must be a JSON object")
    eid, etype = doc.get("id"), doc.get("type")
    if not isinstance(eid, str) or not eid or not isinstance(etype, str) or not etype:
        raise MissingIdOrType("entity needs non-empty string id and type")
    attrs = {}
    for name, body in doc.items():
        if name in RESERVED_NAMES or name == "@context":
            continue
        attrs[name] = parse_attribute(name, body)
    return Entity(eid, etype, attrs)


def parse_entity(document: str | bytes) -> Entity:
    """Parse an entity document in NGSI-LD normalized form."""
    return entity_from_json(loads(document))


def parse_fragment(doc: Any) -> dict[str, Attribute]:
    """Parse a PATCH body: a map of attribute name to attribute document."""
    if not isinstance(doc, dict):
        raise MalformedDocument("attribute fragment must be a JSON object")
    attrs = {name: parse_attribute(name, body) for name, body in doc.items() if name != "@context"}
    if not attrs:
        raise MalformedDocument("attribute fragment names no attributes")
    return attrs


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def serialize_entity(entity: Entity) -> str:
    """Deterministic serialization: id, type, then attributes sorted by name."""
    parts = [f'"id":{_dumps(entity.id)}', f'"type":{_dumps(entity.type)}']
    for name in sorted(entity.attrs):
        parts.append(f"{_dumps(name)}:{_dumps(entity.attrs[name].to_json())}")
    return "{" + ",".join(parts) + "}"


def diff_entity(old: Entity, new: Entity) -> list[tuple[str, Attribute]]:
    """Attributes of ``new`` that are absent from or differ from ``old``, by name."""
    if old.id != new.id:
        raise IdMismatch(f"cannot diff {old.id} against {new.id}")
    return [(name, attr) for name, attr in sorted(new.attrs.items()) if old.attrs.get(name) != attr]
