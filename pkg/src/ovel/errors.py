"""Exception hierarchy shared by every ovel module."""

from __future__ import annotations

from typing import Sequence


class OvelError(Exception):
    """Base class for all ovel errors."""


class ParseError(OvelError):
    def __init__(self, path: str, line_no: int | None, detail: str):
        self.path = path
        self.line_no = line_no
        self.detail = detail
        where = f"{path}:{line_no}" if line_no is not None else path
        super().__init__(f"{where}: {detail}")


class DimMismatch(OvelError):
    def __init__(self, detail: str, entity_id: str | None = None):
        self.entity_id = entity_id
        super().__init__(detail)


class DuplicateId(OvelError):
    def __init__(self, entity_id: str):
        self.entity_id = entity_id
        super().__init__(f"duplicate entity_id {entity_id!r}")


class NonContiguousIndices(OvelError):
    def __init__(self, indices: Sequence[int]):
        self.indices = list(indices)
        super().__init__(f"clip indices are not 0..n-1: {self.indices[:20]}")


class InvalidData(OvelError):
    """Raised when a value fails validation; carries the violation list."""

    def __init__(self, violations: Sequence[object]):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations[:10])
        super().__init__(f"{len(self.violations)} violation(s): {lines}")


class ZeroVector(OvelError):
    def __init__(self, detail: str = "zero vector", entity_id: str | None = None):
        self.entity_id = entity_id
        super().__init__(detail if entity_id is None else f"{detail} ({entity_id})")


class NoModality(OvelError):
    """fuse() was called with neither text nor image input."""


class NoSignal(OvelError):
    """Neither memory text nor keyframes are available to build a query."""


class EmptyTrace(OvelError):
    """No records remain to score."""


class EmptyInput(OvelError):
    """A metric was asked to aggregate over zero queries."""


class InvalidParams(OvelError):
    """Generator or config parameters are out of range."""


class UnboundPlaceholder(OvelError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unbound placeholder {{{name}}}")


class GatewayError(OvelError):
    """Any failure reported by an LLM backend."""


class Timeout(GatewayError):
    """The backend did not answer in time (or could not be reached)."""


class HttpStatus(GatewayError):
    def __init__(self, code: int, body: str = ""):
        self.code = code
        self.body = body
        super().__init__(f"HTTP {code}: {body[:200]}")


class MalformedResponse(GatewayError):
    """The backend answered but the payload could not be interpreted."""
