"""Thin synchronous client for the DTDS HTTP API."""

from __future__ import annotations

from pathlib import Path
from typing import Any
from urllib.parse import quote

import httpx

from dtds import errors
from dtds.model import Entity, entity_from_json

_ERRORS = {
    cls.code: cls
    for cls in vars(errors).values()
    if isinstance(cls, type) and issubclass(cls, errors.DTDSError)
}


def _raise_for_problem(resp: httpx.Response) -> None:
    """Re-raise a problem document as the matching DTDSError subclass."""
    if resp.is_success:
        return
    try:
        doc = resp.json()
    except ValueError:
        doc = {}
    code = doc.get("type", "")
    cls = _ERRORS.get(code) or (errors.NotFound if resp.status_code == 404 else errors.DTDSError)
    extra = {k: v for k, v in doc.items() if k not in ("type", "title", "detail")}
    exc = cls.__new__(cls)
    errors.DTDSError.__init__(exc, doc.get("detail") or f"HTTP {resp.status_code}", **extra)
    exc.findings = extra.get("findings", [])
    exc.status = resp.status_code
    raise exc


def _q(entity_id: str) -> str:
    return quote(entity_id, safe="")


class DTDSClient:
    def __init__(self, server: str, tenant: str = "", timeout: float = 10.0) -> None:
        self.server = server.rstrip("/")
        self.tenant = tenant
        headers = {"NGSILD-Tenant": tenant} if tenant else {}
        self.http = httpx.Client(base_url=self.server, headers=headers, timeout=timeout)

    def close(self) -> None:
        self.http.close()

    def __enter__(self) -> DTDSClient:
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    def _request(self, method: str, path: str, **kwargs: Any) -> httpx.Response:
        try:
            resp = self.http.request(method, path, **kwargs)
        except httpx.TransportError as exc:
            raise errors.ServerUnreachable(f"{self.server}: {exc}") from exc
        _raise_for_problem(resp)
        return resp

    # entities
    def create_entity(self, entity: Entity | dict[str, Any]) -> None:
        doc = entity.to_json() if isinstance(entity, Entity) else entity
        self._request("POST", "/ngsi-ld/v1/entities", json=doc)

    def get_entity(self, entity_id: str, local: bool = False) -> Entity:
        params = {"local": "true"} if local else None
        return entity_from_json(self._request("GET", f"/ngsi-ld/v1/entities/{_q(entity_id)}", params=params).json())

    def query(self, **params: Any) -> list[Entity]:
        resp = self._request("GET", "/ngsi-ld/v1/entities", params={k: v for k, v in params.items() if v is not None})
        return [entity_from_json(doc) for doc in resp.json()]

    def patch(self, entity_id: str, fragment: dict[str, Any]) -> dict[str, Any] | None:
        resp = self._request("PATCH", f"/ngsi-ld/v1/entities/{_q(entity_id)}/attrs", json=fragment)
        return resp.json() if resp.status_code == 207 else None

    def delete_entity(self, entity_id: str) -> None:
        self._request("DELETE", f"/ngsi-ld/v1/entities/{_q(entity_id)}")

    # subscriptions and registrations
    def create_subscription(self, doc: dict[str, Any]) -> str:
        return self._request("POST", "/ngsi-ld/v1/subscriptions", json=doc).json()["id"]

    def delete_subscription(self, sub_id: str) -> None:
        self._request("DELETE", f"/ngsi-ld/v1/subscriptions/{_q(sub_id)}")

    def subscription_stats(self, sub_id: str) -> dict[str, Any]:
        return self._request("GET", f"/dtds/v1/subscriptions/{_q(sub_id)}/stats").json()

    def register_source(self, doc: dict[str, Any]) -> str:
        return self._request("POST", "/ngsi-ld/v1/csourceRegistrations", json=doc).json()["id"]

    # scenes
    def resolve_scene(self, scene_id: str, formats: str | None = None, modalities: str | None = None) -> dict[str, Any]:
        params = {k: v for k, v in (("formats", formats), ("modalities", modalities)) if v}
        return self._request("GET", f"/dtds/v1/scenes/{_q(scene_id)}/resolved", params=params).json()

    def validate_scene(self, scene_id: str) -> dict[str, Any]:
        return self._request("POST", f"/dtds/v1/scenes/{_q(scene_id)}/validate").json()

    def watch_scene(self, scene_id: str, endpoint: str | None = None, topic: str | None = None, qos: int = 0) -> dict[str, Any]:
        body: dict[str, Any] = {"qos": qos}
        if endpoint:
            body["endpoint"] = endpoint
        if topic:
            body["topic"] = topic
        return self._request("POST", f"/dtds/v1/scenes/{_q(scene_id)}/watch", json=body).json()

    def changes(self, after_seq: int = 0, limit: int | None = None) -> dict[str, Any]:
        params: dict[str, Any] = {"afterSeq": after_seq}
        if limit:
            params["limit"] = limit
        return self._request("GET", "/dtds/v1/changes", params=params).json()

    # assets
    def put_asset(self, data: bytes, format: str, modality: str, name: str | None = None) -> str:
        headers = {"X-DTDS-Format": format, "X-DTDS-Modality": modality}
        if name:
            headers["X-DTDS-Name"] = name
        return self._request("POST", "/dtds/v1/assets", content=data, headers=headers).json()["resourceId"]

    def put_asset_file(self, path: str | Path, format: str, modality: str) -> str:
        p = Path(path)
        return self.put_asset(p.read_bytes(), format, modality, p.name)

    def get_asset(self, resource_id: str) -> bytes:
        return self._request("GET", f"/dtds/v1/assets/{resource_id}").content

    def asset_meta(self, resource_id: str) -> dict[str, Any]:
        return self._request("GET", f"/dtds/v1/assets/{resource_id}/meta").json()
