"""Exception hierarchy shared by every DTDS module.

Each exception carries a machine-readable ``code`` (used as the problem
document ``type`` over HTTP) and the HTTP status it maps to.
"""

from __future__ import annotations

from typing import Any


class DTDSError(Exception):
    code = "InternalError"
    status = 500

    def __init__(self, message: str = "", **extra: Any) -> None:
        super().__init__(message or self.code)
        self.message = message or self.code
        self.extra = extra

    def problem(self) -> dict[str, Any]:
        doc = {"type": self.code, "title": self.code, "detail": self.message}
        doc.update(self.extra)
        return doc


class MalformedDocument(DTDSError):
    code = "MalformedDocument"
    status = 400


class InvalidAttribute(DTDSError):
    code = "InvalidAttribute"
    status = 400


class MissingIdOrType(DTDSError):
    code = "MissingIdOrType"
    status = 400


class ValidationFailed(DTDSError):
    code = "ValidationFailed"
    status = 400

    def __init__(self, message: str = "", findings: list | None = None) -> None:
        super().__init__(message, findings=[f.to_json() for f in findings or []])
        self.findings = findings or []


class IdMismatch(DTDSError):
    code = "IdMismatch"
    status = 400


class NotFound(DTDSError):
    code = "NotFound"
    status = 404


class AlreadyExists(DTDSError):
    code = "AlreadyExists"
    status = 409


class EmptyFilter(DTDSError):
    code = "EmptyFilter"
    status = 400


class AllStale(DTDSError):
    code = "AllStale"
    status = 409


class InvalidTenant(DTDSError):
    code = "InvalidTenant"
    status = 400


class SceneHeadMissing(DTDSError):
    code = "SceneHeadMissing"
    status = 404


class SceneNotFound(DTDSError):
    code = "SceneNotFound"
    status = 404


class SceneInvalid(DTDSError):
    code = "SceneInvalid"
    status = 400

    def __init__(self, message: str = "", findings: list | None = None) -> None:
        super().__init__(message, findings=[f.to_json() for f in findings or []])
        self.findings = findings or []


class InvalidTarget(DTDSError):
    code = "InvalidTarget"
    status = 400

    def __init__(self, message: str = "", reason: str = "INVALID_TARGET") -> None:
        super().__init__(message, reason=reason)
        self.reason = reason


class InvalidEndpoint(DTDSError):
    code = "InvalidEndpoint"
    status = 400


class FederationUnavailable(DTDSError):
    code = "FederationUnavailable"
    status = 503


class EmptyBatch(DTDSError):
    code = "EmptyBatch"
    status = 400


class TooLarge(DTDSError):
    code = "TooLarge"
    status = 413


class IntegrityError(DTDSError):
    code = "IntegrityError"
    status = 500


class UnknownMethod(DTDSError):
    code = "UnknownMethod"
    status = 400


class MalformedTemplate(DTDSError):
    code = "MalformedTemplate"
    status = 400


class OutOfRange(DTDSError):
    code = "OutOfRange"
    status = 400


class EmptyNetwork(DTDSError):
    code = "EmptyNetwork"
    status = 400


class UnknownLane(DTDSError):
    code = "UnknownLane"
    status = 400


class InvalidNetwork(DTDSError):
    code = "InvalidNetwork"
    status = 400


class Malformed(DTDSError):
    code = "Malformed"
    status = 400


class NonMonotonicTime(DTDSError):
    code = "NonMonotonicTime"
    status = 400


class BrokerUnreachable(DTDSError):
    code = "BrokerUnreachable"
    status = 503


class ServerUnreachable(DTDSError):
    code = "ServerUnreachable"
    status = 503


class BindFailure(DTDSError):
    code = "BindFailure"
    status = 500
