"""Content-addressed hosting for representation assets.

Blobs are opaque: the repository never parses geometry. Each blob is stored
under ``assets/<first two hex>/<sha256>`` and described by a line in the
``metadata.ndjson`` sidecar (last line per id wins on reload).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any

from dtds.errors import IntegrityError, MalformedTemplate, NotFound, TooLarge, UnknownMethod
from dtds.model import Entity, format_timestamp, parse_timestamp, utcnow
from dtds.ontology import TEMPLATE_PLACEHOLDER

DEFAULT_MAX_BYTES = 256 * 1024 * 1024


@dataclass
class AssetMetadata:
    resource_id: str
    size_bytes: int
    format: str
    modality: str
    uploaded_at: datetime
    name: str | None = None

    def to_json(self) -> dict[str, Any]:
        doc = {
            "resourceId": self.resource_id,
            "sizeBytes": self.size_bytes,
            "format": self.format,
            "modality": self.modality,
            "uploadedAt": format_timestamp(self.uploaded_at),
        }
        if self.name is not None:
            doc["name"] = self.name
        return doc

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> AssetMetadata:
        return cls(
            resource_id=doc["resourceId"],
            size_bytes=int(doc["sizeBytes"]),
            format=doc["format"],
            modality=doc["modality"],
            uploaded_at=parse_timestamp(doc["uploadedAt"]),
            name=doc.get("name"),
        )


def _is_digest(value: str) -> bool:
    return len(value) == 64 and all(c in "0123456789abcdef" for c in value)


class AssetRepository:
    def __init__(self, root: str | Path, max_bytes: int = DEFAULT_MAX_BYTES) -> None:
        self.root = Path(root)
        self.max_bytes = max_bytes
        self._blobs = self.root / "assets"
        self._tmp = self.root / "tmp"
        self._meta_path = self.root / "metadata.ndjson"
        self._blobs.mkdir(parents=True, exist_ok=True)
        self._tmp.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._meta: dict[str, AssetMetadata] = {}
        if self._meta_path.exists():
            with open(self._meta_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        meta = AssetMetadata.from_json(json.loads(line))
                        self._meta[meta.resource_id] = meta

    def blob_path(self, resource_id: str) -> Path:
        return self._blobs / resource_id[:2] / resource_id

    def put_asset(self, data: bytes, format: str, modality: str, name: str | None = None) -> str:
        if len(data) > self.max_bytes:
            raise TooLarge(f"asset of {len(data)} bytes exceeds the {self.max_bytes} byte limit")
        resource_id = hashlib.sha256(data).hexdigest()
        path = self.blob_path(resource_id)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self._tmp)
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                # identical concurrent puts race benignly: both renames carry the same bytes
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        with self._lock:
            meta = self._meta.get(resource_id)
            if meta is None:
                meta = AssetMetadata(resource_id, len(data), format.lower(), modality.lower(), utcnow(), name)
            elif name is not None and name != meta.name:
                meta = AssetMetadata(meta.resource_id, meta.size_bytes, meta.format, meta.modality, meta.uploaded_at, name)
            else:
                return resource_id
            self._meta[resource_id] = meta
            with open(self._meta_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(meta.to_json(), separators=(",", ":")) + "\n")
        return resource_id

    def stat_asset(self, resource_id: str) -> AssetMetadata:
        meta = self._meta.get(resource_id)
        if meta is None or not self.blob_path(resource_id).exists():
            raise NotFound(f"asset {resource_id} not found")
        return meta

    def get_asset(self, resource_id: str) -> tuple[bytes, AssetMetadata]:
        if not _is_digest(resource_id):
            raise NotFound(f"asset {resource_id} not found")
        meta = self.stat_asset(resource_id)
        data = self.blob_path(resource_id).read_bytes()
        if hashlib.sha256(data).hexdigest() != resource_id:
            raise IntegrityError(f"stored bytes of {resource_id} no longer match their hash")
        return data, meta

    def list_assets(self) -> list[AssetMetadata]:
        return [self._meta[k] for k in sorted(self._meta)]


def render_access_url(repo: Entity, method_name: str, resource_id: str) -> str:
    """Render one access method of a repository descriptor into a fetchable URL."""
    methods = repo.value("accessMethods") or []
    method = next((m for m in methods if isinstance(m, dict) and m.get("name") == method_name), None)
    if method is None:
        raise UnknownMethod(f"{repo.id} has no access method {method_name!r}")
    kind = method.get("kind")
    if kind == "http-get-template":
        template = method.get("urlTemplate")
        if not isinstance(template, str) or template.count(TEMPLATE_PLACEHOLDER) != 1:
            raise MalformedTemplate(f"template of {method_name!r} needs exactly one {TEMPLATE_PLACEHOLDER}")
        return template.replace(TEMPLATE_PLACEHOLDER, resource_id)
    if kind == "internal":
        base = str(repo.value("baseUri") or "").rstrip("/")
        return f"{base}/dtds/v1/assets/{resource_id}"
    raise UnknownMethod(f"access method kind {kind!r} cannot be rendered")
