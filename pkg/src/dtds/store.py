"""Tenant-scoped in-memory entity store with a sequenced change log.

Every mutation is recorded as one or more :class:`ChangeEvent` records with a
per-tenant, gapless sequence number. The log is mirrored to an append-only
NDJSON file and replayed on startup; the in-memory map stays authoritative.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Iterable

from dtds.errors import (
    AllStale,
    AlreadyExists,
    EmptyFilter,
    InvalidTenant,
    NotFound,
    ValidationFailed,
)
from dtds.model import (
    Attribute,
    Entity,
    format_timestamp,
    parse_attribute,
    parse_timestamp,
    utcnow,
)
from dtds.ontology import validate_entity

log = logging.getLogger(__name__)

CREATED = "@created"
DELETED = "@deleted"
DEFAULT_PAGE_SIZE = 1000


@dataclass(frozen=True)
class ChangeEvent:
    seq: int
    tenant: str
    entity_id: str
    entity_type: str
    attr_name: str
    attr: Attribute | None
    committed_at: datetime

    @property
    def synthetic(self) -> bool:
        return self.attr_name in (CREATED, DELETED)

    def to_json(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "tenant": self.tenant,
            "entityId": self.entity_id,
            "entityType": self.entity_type,
            "attrName": self.attr_name,
            "attr": self.attr.to_json() if self.attr is not None else None,
            "committedAt": format_timestamp(self.committed_at),
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> ChangeEvent:
        name = doc["attrName"]
        attr = None if doc.get("attr") is None else parse_attribute(name, doc["attr"])
        return cls(
            seq=int(doc["seq"]),
            tenant=doc["tenant"],
            entity_id=doc["entityId"],
            entity_type=doc["entityType"],
            attr_name=name,
            attr=attr,
            committed_at=parse_timestamp(doc["committedAt"]),
        )


@dataclass
class QueryFilter:
    type: str | None = None
    id_pattern: str | None = None
    rel_name: str | None = None
    rel_target: str | None = None
    bbox: tuple[float, float, float, float] | None = None

    def is_empty(self) -> bool:
        return not (self.type or self.id_pattern or self.rel_name or self.bbox is not None)

    def matches(self, e: Entity) -> bool:
        if self.type and e.type != self.type:
            return False
        if self.id_pattern and self.id_pattern not in e.id:
            return False
        if self.rel_name and self.rel_target not in e.targets(self.rel_name):
            return False
        if self.bbox is not None:
            p = e.position()
            min_lon, min_lat, max_lon, max_lat = self.bbox
            if p is None or not (min_lon <= p.lon <= max_lon and min_lat <= p.lat <= max_lat):
                return False
        return True


@dataclass
class PatchResult:
    events: list[ChangeEvent]
    skipped: list[str] = field(default_factory=list)


@dataclass
class ChangePage:
    events: list[ChangeEvent]
    next_after: int | None
    """Continuation token: pass as ``after_seq`` to fetch the next page; None when exhausted."""


def check_tenant(tenant: str) -> str:
    if not isinstance(tenant, str) or len(tenant.encode()) > 64 or "/" in tenant:
        raise InvalidTenant(f"invalid tenant name {tenant!r}")
    return tenant


def _newer_or_equal(incoming: Attribute, stored: Attribute | None) -> bool:
    if stored is None or stored.observed_at is None:
        return True
    if incoming.observed_at is None:
        return False
    return incoming.observed_at >= stored.observed_at


class _Tenant:
    def __init__(self) -> None:
        self.lock = threading.RLock()
        self.entities: dict[str, Entity] = {}
        self.events: list[ChangeEvent] = []
        self.seq = 0


def apply_event(entities: dict[str, Entity], event: ChangeEvent) -> None:
    """Apply one logged event to an id -> Entity map (the replay step)."""
    if event.attr_name == CREATED:
        entities[event.entity_id] = Entity(event.entity_id, event.entity_type)
    elif event.attr_name == DELETED:
        entities.pop(event.entity_id, None)
    else:
        current = entities[event.entity_id]
        entities[event.entity_id] = current.with_attrs({event.attr_name: event.attr})


def replay(events: Iterable[ChangeEvent]) -> dict[str, dict[str, Entity]]:
    """Rebuild tenant -> id -> Entity state from a change log."""
    state: dict[str, dict[str, Entity]] = {}
    for ev in events:
        apply_event(state.setdefault(ev.tenant, {}), ev)
    return state


def read_log(path: str | Path) -> list[ChangeEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                events.append(ChangeEvent.from_json(json.loads(line)))
    return events


class ContextStore:
    """In-memory authoritative entity state with an NDJSON journal.

    Writes within one tenant are serialized by a tenant lock so that the
    sequence number, the state mutation and the journal append happen as one
    step; tenants never contend with each other.
    """

    def __init__(
        self,
        log_path: str | Path | None = None,
        page_size: int = DEFAULT_PAGE_SIZE,
        clock: Callable[[], datetime] = utcnow,
    ) -> None:
        self.page_size = page_size
        self.clock = clock
        self._tenants: dict[str, _Tenant] = {}
        self._tenants_lock = threading.Lock()
        self._listeners: list[Callable[[list[ChangeEvent]], None]] = []
        self._log_lock = threading.Lock()
        self._log_path = Path(log_path) if log_path else None
        self._log_fh = None
        if self._log_path is not None:
            if self._log_path.exists():
                self._load(read_log(self._log_path))
            self._log_path.parent.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self._log_path, "a", encoding="utf-8")

    def _load(self, events: list[ChangeEvent]) -> None:
        for ev in events:
            t = self._tenant(ev.tenant)
            if ev.seq != t.seq + 1:
                log.warning("change log gap in tenant %r: %d after %d", ev.tenant, ev.seq, t.seq)
            apply_event(t.entities, ev)
            t.events.append(ev)
            t.seq = ev.seq
        log.info("replayed %d change events", len(events))

    def close(self) -> None:
        with self._log_lock:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None

    def add_listener(self, fn: Callable[[list[ChangeEvent]], None]) -> None:
        """Register a callback receiving each committed batch, in seq order per tenant.

        Callbacks run while the tenant lock is held and must not block.
        """
        self._listeners.append(fn)

    def _tenant(self, tenant: str) -> _Tenant:
        check_tenant(tenant)
        t = self._tenants.get(tenant)
        if t is None:
            with self._tenants_lock:
                t = self._tenants.setdefault(tenant, _Tenant())
        return t

    def tenants(self) -> list[str]:
        return sorted(self._tenants)

    def _commit(self, tenant: str, t: _Tenant, entity: Entity, changes: list[tuple[str, Attribute | None]]) -> list[ChangeEvent]:
        now = self.clock()
        if t.events and now < t.events[-1].committed_at:
            now = t.events[-1].committed_at
        events = []
        for name, attr in changes:
            t.seq += 1
            events.append(ChangeEvent(t.seq, tenant, entity.id, entity.type, name, attr, now))
        t.events.extend(events)
        if self._log_fh is not None:
            lines = "".join(json.dumps(ev.to_json(), separators=(",", ":")) + "\n" for ev in events)
            with self._log_lock:
                self._log_fh.write(lines)
                self._log_fh.flush()
        for fn in self._listeners:
            try:
                fn(events)
            except Exception:
                log.exception("change listener failed")
        return events

    def create_entity(self, tenant: str, entity: Entity) -> int:
        report = validate_entity(entity)
        if not report.valid:
            raise ValidationFailed(f"{entity.id} failed validation", report.errors)
        t = self._tenant(tenant)
        with t.lock:
            if entity.id in t.entities:
                raise AlreadyExists(f"{entity.id} already exists")
            stored = entity.copy()
            t.entities[entity.id] = stored
            changes: list[tuple[str, Attribute | None]] = [(CREATED, None)]
            changes += sorted(stored.attrs.items())
            events = self._commit(tenant, t, stored, changes)
        return events[0].seq

    def get_entity(self, tenant: str, entity_id: str) -> Entity:
        t = self._tenant(tenant)
        with t.lock:
            e = t.entities.get(entity_id)
            if e is None:
                raise NotFound(f"{entity_id} not found")
            return e.copy()

    def query_entities(self, tenant: str, flt: QueryFilter) -> list[Entity]:
        if flt.is_empty():
            raise EmptyFilter("at least one of type, idPattern, relationship or bbox is required")
        t = self._tenant(tenant)
        with t.lock:
            snapshot = list(t.entities.values())
        return sorted((e.copy() for e in snapshot if flt.matches(e)), key=lambda e: e.id)

    def all_entities(self, tenant: str) -> list[Entity]:
        t = self._tenant(tenant)
        with t.lock:
            return sorted((e.copy() for e in t.entities.values()), key=lambda e: e.id)

    def patch_attributes(self, tenant: str, entity_id: str, fragment: dict[str, Attribute]) -> PatchResult:
        """Last-write-wins upsert by observedAt; stale attributes are skipped, not fatal."""
        t = self._tenant(tenant)
        with t.lock:
            current = t.entities.get(entity_id)
            if current is None:
                raise NotFound(f"{entity_id} not found")
            receipt = self.clock()
            accepted: dict[str, Attribute] = {}
            skipped = []
            for name in sorted(fragment):
                attr = fragment[name]
                if attr.observed_at is None:
                    attr = Attribute(attr.kind, attr.value, attr.object, receipt, attr.unit_code)
                if _newer_or_equal(attr, current.attrs.get(name)):
                    accepted[name] = attr
                else:
                    skipped.append(name)
            if not accepted:
                raise AllStale(f"every attribute of the patch to {entity_id} is stale", skipped=skipped)
            updated = current.with_attrs(accepted)
            before = {(f.code, f.message) for f in validate_entity(current).errors}
            introduced = [f for f in validate_entity(updated).errors if (f.code, f.message) not in before]
            if introduced:
                raise ValidationFailed(f"patch would invalidate {entity_id}", introduced)
            t.entities[entity_id] = updated
            events = self._commit(tenant, t, updated, sorted(accepted.items()))
        return PatchResult(events, skipped)

    def delete_entity(self, tenant: str, entity_id: str) -> None:
        t = self._tenant(tenant)
        with t.lock:
            current = t.entities.pop(entity_id, None)
            if current is None:
                raise NotFound(f"{entity_id} not found")
            self._commit(tenant, t, current, [(DELETED, None)])

    def changes_since(self, tenant: str, after_seq: int, limit: int | None = None) -> ChangePage:
        if after_seq < 0:
            raise ValueError("after_seq must be >= 0")
        limit = limit or self.page_size
        t = self._tenant(tenant)
        with t.lock:
            # seq n lives at index n - 1 because the log is gapless from 1
            start = min(after_seq, len(t.events))
            page = t.events[start : start + limit]
            more = start + limit < len(t.events)
        return ChangePage(page, page[-1].seq if more else None)

    def latest_seq(self, tenant: str) -> int:
        return self._tenant(tenant).seq

    def snapshot(self) -> dict[str, dict[str, Entity]]:
        out = {}
        for name in self.tenants():
            t = self._tenants[name]
            with t.lock:
                out[name] = {eid: e.copy() for eid, e in t.entities.items()}
        return out

    def events(self, tenant: str) -> list[ChangeEvent]:
        t = self._tenant(tenant)
        with t.lock:
            return list(t.events)
