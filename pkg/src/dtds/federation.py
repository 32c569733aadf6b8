"""Context source registrations and the federated read path.

Reads fan out concurrently to every matching registration (another DTDS
instance, or anything speaking the same HTTP subset) and merge with local
state attribute by attribute. Writes never leave the local store.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Iterable
from urllib.parse import quote, urlparse

import httpx

from dtds.errors import AlreadyExists, FederationUnavailable, IdMismatch, InvalidEndpoint, NotFound
from dtds.model import Entity, entity_from_json, is_entity_id
from dtds.store import ContextStore, QueryFilter, check_tenant

log = logging.getLogger(__name__)

_MIN_TS = datetime.min.replace(tzinfo=timezone.utc)


@dataclass(frozen=True)
class ContextSourceRegistration:
    id: str
    tenant: str
    covered_types: frozenset[str]
    endpoint: str
    covered_id_pattern: str | None = None
    timeout_ms: int = 2000

    def check(self) -> None:
        check_tenant(self.tenant)
        if not is_entity_id(self.id):
            raise InvalidEndpoint(f"registration id {self.id!r} is not a URN")
        if not self.covered_types:
            raise InvalidEndpoint("registration must cover at least one entity type")
        parsed = urlparse(self.endpoint)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise InvalidEndpoint(f"endpoint {self.endpoint!r} must be an http(s) URI")
        if self.timeout_ms <= 0:
            raise InvalidEndpoint("timeoutMs must be positive")

    def to_json(self) -> dict[str, Any]:
        entities: list[dict[str, Any]] = [{"type": t} for t in sorted(self.covered_types)]
        if self.covered_id_pattern:
            for entry in entities:
                entry["idPattern"] = self.covered_id_pattern
        return {
            "id": self.id,
            "type": "ContextSourceRegistration",
            "information": [{"entities": entities}],
            "endpoint": self.endpoint,
            "timeoutMs": self.timeout_ms,
        }

    @classmethod
    def from_json(cls, doc: Any, tenant: str) -> ContextSourceRegistration:
        if not isinstance(doc, dict) or not isinstance(doc.get("id"), str):
            raise InvalidEndpoint("registration document needs an id")
        types: set[str] = set()
        pattern = None
        for info in doc.get("information") or []:
            for entry in (info or {}).get("entities") or []:
                if entry.get("type"):
                    types.add(entry["type"])
                pattern = entry.get("idPattern") or pattern
        reg = cls(
            id=doc["id"],
            tenant=tenant,
            covered_types=frozenset(types),
            endpoint=str(doc.get("endpoint", "")),
            covered_id_pattern=pattern,
            timeout_ms=int(doc.get("timeoutMs", 2000)),
        )
        reg.check()
        return reg


@dataclass
class Federated:
    """Result envelope: the payload plus warnings about sources that did not answer."""

    value: Any
    warnings: list[str] = field(default_factory=list)


def type_from_id(entity_id: str) -> str | None:
    parts = entity_id.split(":")
    return parts[2] if len(parts) >= 4 and parts[0] == "urn" else None


def match_registrations(
    tenant: str,
    flt: QueryFilter,
    registrations: Iterable[ContextSourceRegistration],
    entity_id: str | None = None,
) -> list[ContextSourceRegistration]:
    """Registrations covering the filter's type and id scope, in registration order."""
    out = []
    for reg in registrations:
        if reg.tenant != tenant or flt.type not in reg.covered_types:
            continue
        pattern = reg.covered_id_pattern
        if pattern:
            if entity_id is not None and pattern not in entity_id:
                continue
            if flt.id_pattern and pattern not in flt.id_pattern and flt.id_pattern not in pattern:
                continue
        out.append(reg)
    return out


def merge_entities(local: Entity | None, remotes: list[Entity]) -> Entity:
    """Attribute-wise union; newest observedAt wins, then local, then earlier remotes."""
    sources = ([local] if local is not None else []) + list(remotes)
    if not sources:
        raise ValueError("merge_entities needs at least one entity")
    first = sources[0]
    for other in sources[1:]:
        if other.id != first.id or other.type != first.type:
            raise IdMismatch(f"cannot merge {other.id}/{other.type} into {first.id}/{first.type}")
    winners = {}
    best: dict[str, datetime] = {}
    for source in sources:
        for name, attr in source.attrs.items():
            stamp = attr.observed_at or _MIN_TS
            if name not in best or stamp > best[name]:
                best[name] = stamp
                winners[name] = attr
    return Entity(first.id, first.type, winners)


class Federation:
    def __init__(self, store: ContextStore, max_workers: int = 16) -> None:
        self.store = store
        self._regs: dict[str, dict[str, ContextSourceRegistration]] = {}
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="federation")
        self._http = httpx.Client()

    def close(self) -> None:
        self._pool.shutdown(wait=False, cancel_futures=True)
        self._http.close()

    def register_context_source(self, reg: ContextSourceRegistration) -> str:
        reg.check()
        with self._lock:
            regs = self._regs.setdefault(reg.tenant, {})
            if reg.id in regs:
                raise AlreadyExists(f"registration {reg.id} already exists")
            regs[reg.id] = reg
        return reg.id

    def delete_registration(self, tenant: str, reg_id: str) -> None:
        with self._lock:
            if self._regs.get(tenant, {}).pop(reg_id, None) is None:
                raise NotFound(f"registration {reg_id} not found")

    def registrations(self, tenant: str) -> list[ContextSourceRegistration]:
        return list(self._regs.get(tenant, {}).values())

    def _remote_get(self, reg: ContextSourceRegistration, tenant: str, entity_id: str, timeout: float) -> Entity | None:
        url = f"{reg.endpoint.rstrip('/')}/ngsi-ld/v1/entities/{quote(entity_id, safe='')}"
        resp = self._http.get(url, params={"local": "true"}, headers={"NGSILD-Tenant": tenant}, timeout=timeout)
        if resp.status_code == 404:
            return None
        resp.raise_for_status()
        return entity_from_json(resp.json())

    def _remote_query(self, reg: ContextSourceRegistration, tenant: str, flt: QueryFilter, timeout: float) -> list[Entity]:
        params = query_params(flt)
        params["local"] = "true"
        url = f"{reg.endpoint.rstrip('/')}/ngsi-ld/v1/entities"
        resp = self._http.get(url, params=params, headers={"NGSILD-Tenant": tenant}, timeout=timeout)
        resp.raise_for_status()
        return [entity_from_json(doc) for doc in resp.json()]

    def _fan_out(self, regs, call, cap: float | None) -> tuple[list[tuple[int, Any]], list[str]]:
        """Run ``call(reg, timeout)`` on every registration; gather results by rank."""
        timeouts = {r.id: min(r.timeout_ms / 1000.0, cap) if cap else r.timeout_ms / 1000.0 for r in regs}
        futures = {self._pool.submit(call, r, timeouts[r.id]): (rank, r) for rank, r in enumerate(regs)}
        done, pending = wait(futures, timeout=max(timeouts.values(), default=0) + 0.05)
        results, warnings = [], []
        for fut in pending:
            fut.cancel()
            warnings.append(f"SOURCE_TIMEOUT:{futures[fut][1].id}")
        for fut in done:
            rank, reg = futures[fut]
            try:
                results.append((rank, fut.result()))
            except httpx.TimeoutException:
                warnings.append(f"SOURCE_TIMEOUT:{reg.id}")
            except Exception as exc:
                log.warning("context source %s failed: %s", reg.id, exc)
                warnings.append(f"SOURCE_ERROR:{reg.id}")
        results.sort(key=lambda pair: pair[0])
        return results, sorted(warnings)

    def federated_get(
        self, tenant: str, entity_id: str, type_hint: str | None = None, timeout_cap: float | None = None
    ) -> Federated:
        type_hint = type_hint or type_from_id(entity_id)
        regs = match_registrations(tenant, QueryFilter(type=type_hint), self.registrations(tenant), entity_id=entity_id)
        try:
            local = self.store.get_entity(tenant, entity_id)
        except NotFound:
            local = None
        if not regs:
            if local is None:
                raise NotFound(f"{entity_id} not found")
            return Federated(local)
        results, warnings = self._fan_out(
            regs, lambda reg, t: self._remote_get(reg, tenant, entity_id, t), timeout_cap
        )
        remotes = [e for _, e in results if e is not None]
        if local is None and not remotes:
            if warnings:
                raise FederationUnavailable(f"{entity_id} not found locally and sources failed", warnings=warnings)
            raise NotFound(f"{entity_id} not found in any source")
        return Federated(merge_entities(local, remotes), warnings)

    def federated_query(self, tenant: str, flt: QueryFilter, timeout_cap: float | None = None) -> Federated:
        local = {e.id: e for e in self.store.query_entities(tenant, flt)}
        regs = match_registrations(tenant, flt, self.registrations(tenant))
        if not regs:
            return Federated([local[k] for k in sorted(local)])
        results, warnings = self._fan_out(regs, lambda reg, t: self._remote_query(reg, tenant, flt, t), timeout_cap)
        remote_by_id: dict[str, list[Entity]] = {}
        for _, entities in results:
            for e in entities:
                remote_by_id.setdefault(e.id, []).append(e)
        merged = []
        for eid in sorted(set(local) | set(remote_by_id)):
            mine = local.get(eid)
            theirs = [e for e in remote_by_id.get(eid, []) if mine is None or e.type == mine.type]
            merged.append(merge_entities(mine, theirs))
        return Federated(merged, warnings)


def query_params(flt: QueryFilter) -> dict[str, str]:
    params = {}
    if flt.type:
        params["type"] = flt.type
    if flt.id_pattern:
        params["idPattern"] = flt.id_pattern
    if flt.rel_name:
        params["relName"] = flt.rel_name
        params["relTarget"] = flt.rel_target or ""
    if flt.bbox is not None:
        params["bbox"] = ",".join(repr(float(x)) for x in flt.bbox)
    return params
