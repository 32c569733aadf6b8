"""HTTP surface: an NGSI-LD subset plus the DTDS scene and asset extensions."""

from __future__ import annotations

import json
import logging
import threading
import time
from typing import Any

import uvicorn
from starlette.applications import Starlette
from starlette.exceptions import HTTPException
from starlette.requests import Request
from starlette.responses import JSONResponse, Response
from starlette.routing import Route

from dtds.errors import BindFailure, DTDSError, MalformedDocument
from dtds.federation import ContextSourceRegistration, Federated
from dtds.model import entity_from_json, format_timestamp, loads, parse_fragment, utcnow
from dtds.notify import Subscription
from dtds.scene import ClientCapabilities
from dtds.service import DTDS, ServiceConfig
from dtds.store import QueryFilter, check_tenant

log = logging.getLogger(__name__)

TENANT_HEADER = "NGSILD-Tenant"
WARNING_HEADER = "NGSILD-Warning"


def _json(body: Any, status: int = 200, headers: dict[str, str] | None = None) -> Response:
    data = json.dumps(body, separators=(",", ":"), ensure_ascii=False).encode()
    return Response(data, status_code=status, media_type="application/json", headers=headers)


def _problem(code: str, title: str, detail: str, status: int, **extra: Any) -> JSONResponse:
    return JSONResponse({"type": code, "title": title, "detail": detail, **extra}, status_code=status)


def _tenant(request: Request) -> str:
    return check_tenant(request.headers.get(TENANT_HEADER, ""))


def _warned(result: Federated, body: Any, status: int = 200) -> Response:
    headers = {WARNING_HEADER: ",".join(result.warnings)} if result.warnings else None
    return _json(body, status, headers)


def _parse_bbox(text: str | None) -> tuple[float, float, float, float] | None:
    if text is None:
        return None
    try:
        parts = [float(p) for p in text.split(",")]
    except ValueError:
        raise MalformedDocument(f"bbox {text!r} must be four numbers") from None
    if len(parts) != 4:
        raise MalformedDocument(f"bbox {text!r} must be four numbers")
    return tuple(parts)  # type: ignore[return-value]


async def _body(request: Request) -> Any:
    return loads(await request.body())


def _flag(request: Request, name: str) -> bool:
    return request.query_params.get(name, "false").lower() in ("1", "true", "yes")


def _int_param(request: Request, name: str, default: int | None) -> int | None:
    raw = request.query_params.get(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise MalformedDocument(f"query parameter {name} must be an integer") from None


def create_app(service: DTDS) -> Starlette:
    # -- entities -------------------------------------------------------------

    async def create_entity(request: Request) -> Response:
        tenant = _tenant(request)
        entity = entity_from_json(await _body(request))
        service.store.create_entity(tenant, entity)
        return Response(status_code=201, headers={"Location": f"/ngsi-ld/v1/entities/{entity.id}"})

    def get_entity(request: Request) -> Response:
        tenant = _tenant(request)
        entity_id = request.path_params["entity_id"]
        if _flag(request, "local"):
            return _json(service.store.get_entity(tenant, entity_id).to_json())
        result = service.federation.federated_get(tenant, entity_id, request.query_params.get("type"))
        return _warned(result, result.value.to_json())

    def query_entities(request: Request) -> Response:
        tenant = _tenant(request)
        params = request.query_params
        flt = QueryFilter(
            params.get("type"),
            params.get("idPattern"),
            params.get("relName"),
            params.get("relTarget"),
            _parse_bbox(params.get("bbox")),
        )
        if _flag(request, "local"):
            return _json([e.to_json() for e in service.store.query_entities(tenant, flt)])
        result = service.federation.federated_query(tenant, flt)
        return _warned(result, [e.to_json() for e in result.value])

    async def patch_attrs(request: Request) -> Response:
        tenant = _tenant(request)
        fragment = parse_fragment(await _body(request))
        result = service.store.patch_attributes(tenant, request.path_params["entity_id"], fragment)
        if result.skipped:
            updated = sorted({ev.attr_name for ev in result.events})
            return _json({"updated": updated, "notUpdated": result.skipped}, 207)
        return Response(status_code=204)

    async def delete_entity(request: Request) -> Response:
        service.store.delete_entity(_tenant(request), request.path_params["entity_id"])
        return Response(status_code=204)

    # -- subscriptions and registrations --------------------------------------

    async def create_subscription(request: Request) -> Response:
        tenant = _tenant(request)
        sub = Subscription.from_json(await _body(request), tenant)
        service.dispatcher.create_subscription(sub)
        return _json({"id": sub.id}, 201, {"Location": f"/ngsi-ld/v1/subscriptions/{sub.id}"})

    async def list_subscriptions(request: Request) -> Response:
        return _json([s.to_json() for s in service.dispatcher.subscriptions(_tenant(request))])

    async def get_subscription(request: Request) -> Response:
        sub = service.dispatcher.get_subscription(_tenant(request), request.path_params["sub_id"])
        return _json(sub.to_json())

    def delete_subscription(request: Request) -> Response:
        service.dispatcher.delete_subscription(_tenant(request), request.path_params["sub_id"])
        return Response(status_code=204)

    async def subscription_stats(request: Request) -> Response:
        stats = service.dispatcher.stats(_tenant(request), request.path_params["sub_id"]).to_json()
        stats["deliveryDropsTotal"] = service.dispatcher.deliverer.dropped
        return _json(stats)

    async def register_source(request: Request) -> Response:
        tenant = _tenant(request)
        reg = ContextSourceRegistration.from_json(await _body(request), tenant)
        service.federation.register_context_source(reg)
        return _json({"id": reg.id}, 201, {"Location": f"/ngsi-ld/v1/csourceRegistrations/{reg.id}"})

    async def list_sources(request: Request) -> Response:
        return _json([r.to_json() for r in service.federation.registrations(_tenant(request))])

    async def delete_source(request: Request) -> Response:
        service.federation.delete_registration(_tenant(request), request.path_params["reg_id"])
        return Response(status_code=204)

    # -- scenes ---------------------------------------------------------------

    def resolved_scene(request: Request) -> Response:
        params = request.query_params
        caps = ClientCapabilities.parse(params.get("formats"), params.get("modalities"))
        return _json(service.resolve_scene(_tenant(request), request.path_params["scene_id"], caps).to_json())

    async def validate_scene(request: Request) -> Response:
        return _json(service.validate_scene(_tenant(request), request.path_params["scene_id"]).to_json())

    async def watch_scene(request: Request) -> Response:
        tenant = _tenant(request)
        raw = await request.body()
        body = loads(raw) if raw.strip() else {}
        if not isinstance(body, dict):
            raise MalformedDocument("watch body must be a JSON object")
        qos = body.get("qos", 0)
        if isinstance(qos, bool) or not isinstance(qos, int):
            raise MalformedDocument("qos must be an integer")
        sub_id, acm = service.watch_scene(
            tenant, request.path_params["scene_id"], body.get("endpoint"), body.get("topic"), qos
        )
        return _json({"subscriptionId": sub_id, "acm": acm}, 201)

    # -- change log -----------------------------------------------------------

    async def changes(request: Request) -> Response:
        after = _int_param(request, "afterSeq", 0)
        if after < 0:
            raise MalformedDocument("afterSeq must be >= 0")
        limit = _int_param(request, "limit", None)
        if limit is not None and limit <= 0:
            raise MalformedDocument("limit must be positive")
        page = service.store.changes_since(_tenant(request), after, limit)
        return _json({"events": [ev.to_json() for ev in page.events], "next": page.next_after})

    # -- assets ---------------------------------------------------------------

    async def put_asset(request: Request) -> Response:
        fmt = request.headers.get("X-DTDS-Format")
        modality = request.headers.get("X-DTDS-Modality")
        if not fmt or not modality:
            raise MalformedDocument("X-DTDS-Format and X-DTDS-Modality headers are required")
        data = await request.body()
        resource_id = service.assets.put_asset(data, fmt, modality, request.headers.get("X-DTDS-Name"))
        return _json({"resourceId": resource_id}, 201, {"Location": f"/dtds/v1/assets/{resource_id}"})

    def get_asset(request: Request) -> Response:
        data, meta = service.assets.get_asset(request.path_params["resource_id"])
        return Response(
            data,
            media_type="application/octet-stream",
            headers={"X-DTDS-Format": meta.format, "X-DTDS-Modality": meta.modality},
        )

    async def asset_meta(request: Request) -> Response:
        return _json(service.assets.stat_asset(request.path_params["resource_id"]).to_json())

    async def health(request: Request) -> Response:
        return _json({"status": "ok", "time": format_timestamp(utcnow())})

    # -- errors ---------------------------------------------------------------

    async def dtds_error(request: Request, exc: DTDSError) -> Response:
        return _json(exc.problem(), exc.status)

    async def http_error(request: Request, exc: HTTPException) -> Response:
        code = {404: "ResourceNotFound", 405: "MethodNotAllowed"}.get(exc.status_code, f"Http{exc.status_code}")
        return _problem(code, code, str(exc.detail), exc.status_code)

    routes = [
        Route("/ngsi-ld/v1/entities", create_entity, methods=["POST"]),
        Route("/ngsi-ld/v1/entities", query_entities, methods=["GET"]),
        Route("/ngsi-ld/v1/entities/{entity_id}", get_entity, methods=["GET"]),
        Route("/ngsi-ld/v1/entities/{entity_id}", delete_entity, methods=["DELETE"]),
        Route("/ngsi-ld/v1/entities/{entity_id}/attrs", patch_attrs, methods=["PATCH"]),
        Route("/ngsi-ld/v1/subscriptions", create_subscription, methods=["POST"]),
        Route("/ngsi-ld/v1/subscriptions", list_subscriptions, methods=["GET"]),
        Route("/ngsi-ld/v1/subscriptions/{sub_id}", get_subscription, methods=["GET"]),
        Route("/ngsi-ld/v1/subscriptions/{sub_id}", delete_subscription, methods=["DELETE"]),
        Route("/ngsi-ld/v1/csourceRegistrations", register_source, methods=["POST"]),
        Route("/ngsi-ld/v1/csourceRegistrations", list_sources, methods=["GET"]),
        Route("/ngsi-ld/v1/csourceRegistrations/{reg_id}", delete_source, methods=["DELETE"]),
        Route("/dtds/v1/subscriptions/{sub_id}/stats", subscription_stats, methods=["GET"]),
        Route("/dtds/v1/scenes/{scene_id}/resolved", resolved_scene, methods=["GET"]),
        Route("/dtds/v1/scenes/{scene_id}/validate", validate_scene, methods=["POST"]),
        Route("/dtds/v1/scenes/{scene_id}/watch", watch_scene, methods=["POST"]),
        Route("/dtds/v1/changes", changes, methods=["GET"]),
        Route("/dtds/v1/assets", put_asset, methods=["POST"]),
        Route("/dtds/v1/assets/{resource_id}", get_asset, methods=["GET"]),
        Route("/dtds/v1/assets/{resource_id}/meta", asset_meta, methods=["GET"]),
        Route("/dtds/v1/health", health, methods=["GET"]),
    ]
    app = Starlette(routes=routes, exception_handlers={DTDSError: dtds_error, HTTPException: http_error})
    app.state.service = service
    return app


class ServerThread:
    """Run the service under uvicorn on a background thread (tests, in-process tools)."""

    def __init__(self, service: DTDS, host: str = "127.0.0.1", port: int = 0) -> None:
        self.service = service
        self.app = create_app(service)
        config = uvicorn.Config(self.app, host=host, port=port, log_level="warning", access_log=False, lifespan="off")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, name="dtds-http", daemon=True)

    def start(self, timeout: float = 10.0) -> ServerThread:
        self.thread.start()
        deadline = time.monotonic() + timeout
        while not self.server.started:
            if not self.thread.is_alive() or time.monotonic() > deadline:
                raise BindFailure("HTTP server failed to start")
            time.sleep(0.01)
        return self

    @property
    def port(self) -> int:
        return self.server.servers[0].sockets[0].getsockname()[1]

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def stop(self, drain_timeout: float = 5.0) -> None:
        self.service.dispatcher.drain(drain_timeout)
        self.server.should_exit = True
        self.thread.join(timeout=10)
        self.service.close(drain_timeout=0)


def http_serve(config: ServiceConfig, host: str = "127.0.0.1", port: int = 8080) -> None:
    """Serve until interrupted; shutdown drains delivery queues for at most 5 s."""
    service = DTDS(config)
    app = create_app(service)
    server = uvicorn.Server(uvicorn.Config(app, host=host, port=port, log_level="info", access_log=False, lifespan="off"))
    try:
        server.run()
    except SystemExit as exc:
        raise BindFailure(f"could not bind {host}:{port}") from exc
    finally:
        service.close(drain_timeout=5.0)
    if not server.started:
        raise BindFailure(f"could not bind {host}:{port}")
