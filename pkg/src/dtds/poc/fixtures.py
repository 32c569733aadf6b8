"""Descriptor documents for the traffic scene: road, real car and virtual cars."""

from __future__ import annotations

import hashlib
import time
from typing import Any

from dtds.geo import RoadNetwork, heading_to_yaw, lane_point, local_to_geo, network_from_json
from dtds.model import format_timestamp, from_epoch, local_name
from dtds.poc.sim import Vehicle
from dtds.poc.trace import default_ingest_topic

SCENE_ID = "urn:ngsi-ld:SceneHead:poc"
REAL_CAR_ID = "urn:ngsi-ld:DynamicAsset:realcar"
REPOSITORY_ID = "urn:ngsi-ld:AssetRepositoryDescriptor:local"
CAR_MESH = b"glTF placeholder car mesh\n"
ROAD_SPLAT = b"gaussian splat placeholder road\n"


def loop_network(width: float = 200.0, height: float = 100.0, lat: float = 38.25, lon: float = 21.73) -> RoadNetwork:
    """A rectangular one-lane ring, driven counter-clockwise, that wraps around."""
    points = [[0.0, 0.0], [width, 0.0], [width, height], [0.0, height], [0.0, 0.0]]
    return network_from_json(
        {
            "origin": {"lat": lat, "lon": lon},
            "lanes": [{"id": "ring", "points": points, "speedLimit": 13.9}],
            "connections": [{"from": "ring", "to": "ring"}],
        }
    )


def _geo(value_lon: float, value_lat: float, stamp: str | None) -> dict[str, Any]:
    doc: dict[str, Any] = {"type": "GeoProperty", "value": {"type": "Point", "coordinates": [value_lon, value_lat]}}
    if stamp:
        doc["observedAt"] = stamp
    return doc


def _rel(target: str | list[str]) -> dict[str, Any]:
    return {"type": "Relationship", "object": target}


def _prop(value: Any) -> dict[str, Any]:
    return {"type": "Property", "value": value}


def _vehicle_doc(network: RoadNetwork, v: Vehicle, stamp: str) -> dict[str, Any]:
    lp, heading = lane_point(network, v.lane_id, v.s)
    g = local_to_geo(network.origin, lp)
    return {
        "id": v.id,
        "type": "DynamicAsset",
        "position": _geo(g.lon, g.lat, stamp),
        "pose": {
            "type": "Property",
            "value": {"orientation": {"roll": 0.0, "pitch": 0.0, "yaw": heading_to_yaw(heading)}},
            "observedAt": stamp,
        },
    }


def scene_documents(
    network: RoadNetwork,
    virtual: list[Vehicle],
    real: Vehicle | None,
    broker: str,
    base_uri: str,
    tenant: str = "",
    now: float | None = None,
) -> list[dict[str, Any]]:
    """Entity documents in creation order: repository, ACMs, RRs/CRs, assets, head."""
    stamp = format_timestamp(from_epoch(time.time() if now is None else now))
    car_rr = "urn:ngsi-ld:RepresentationReference:car-mesh"
    road_rr = "urn:ngsi-ld:RepresentationReference:road-splat"
    docs: list[dict[str, Any]] = [
        {
            "id": REPOSITORY_ID,
            "type": "AssetRepositoryDescriptor",
            "baseUri": _prop(base_uri),
            "accessMethods": _prop([{"name": "internal", "kind": "internal"}]),
        }
    ]
    acm_id = "urn:ngsi-ld:ACM:realcar-ingest"
    if real is not None:
        docs.append(
            {
                "id": acm_id,
                "type": "ACM",
                "protocol": _prop("mqtt"),
                "endpoint": _prop(broker),
                "topic": _prop(default_ingest_topic(tenant, real.id)),
                "qos": _prop(0),
            }
        )
    for rr_id, blob, modality, fmt in (
        (car_rr, CAR_MESH, "mesh", "gltf"),
        (road_rr, ROAD_SPLAT, "gaussian-splat", "splat"),
    ):
        docs.append(
            {
                "id": rr_id,
                "type": "RepresentationReference",
                "modality": _prop(modality),
                "format": _prop(fmt),
                "resourceId": _prop(hashlib.sha256(blob).hexdigest()),
                "sizeBytes": _prop(len(blob)),
                "inRepository": _rel(REPOSITORY_ID),
            }
        )
    for v in virtual:
        docs.append(
            {
                "id": f"urn:ngsi-ld:ContextReference:{local_name(v.id)}-speed",
                "type": "ContextReference",
                "sourceEntity": _rel(v.id),
                "attributeMap": _prop({"speed": "speed"}),
                "metadata": _prop({"unitCode": "MTS", "producer": "simulator"}),
            }
        )

    road = {
        "id": "urn:ngsi-ld:StaticAsset:road",
        "type": "StaticAsset",
        "position": _geo(network.origin.lon, network.origin.lat, None),
        "hasRepresentation": _rel(road_rr),
    }
    assets = [road]
    if real is not None:
        doc = _vehicle_doc(network, real, stamp)
        doc.update(hasRepresentation=_rel(car_rr), syncChannel=_rel(acm_id))
        assets.append(doc)
    for v in virtual:
        doc = _vehicle_doc(network, v, stamp)
        doc.update(
            speed={"type": "Property", "value": v.v, "unitCode": "MTS", "observedAt": stamp},
            hasRepresentation=_rel(car_rr),
            hasContextRef=_rel(f"urn:ngsi-ld:ContextReference:{local_name(v.id)}-speed"),
        )
        assets.append(doc)
    docs.extend(assets)

    lons, lats = [], []
    for lane in network.lanes.values():
        for p in lane.points:
            g = local_to_geo(network.origin, p)
            lons.append(g.lon)
            lats.append(g.lat)
    margin = 0.001
    docs.append(
        {
            "id": SCENE_ID,
            "type": "SceneHead",
            "name": _prop("live traffic twin"),
            "areaOrigin": _geo(network.origin.lon, network.origin.lat, None),
            "areaBounds": _prop([min(lons) - margin, min(lats) - margin, max(lons) + margin, max(lats) + margin]),
            "hasAsset": _rel([a["id"] for a in assets]),
        }
    )
    return docs
