"""Service error type shared by every service surface.

Errors carry a machine-readable code; the HTTP layer renders them as
``{"code": ..., "message": ...}`` and maps codes to status numbers.
"""

from __future__ import annotations

# error codes used across the service surfaces
CAPACITY = "capacity"
AUTHORIZATION = "authorization"
STATE = "state"
POLICY = "policy"
NOT_FOUND = "not_found"
CONFLICT = "conflict"
FORMAT = "format"
RANGE = "range"
IDENTITY = "identity"
REPLAY = "replay"
USAGE = "usage"

ALL_CODES = frozenset(
    {
        CAPACITY,
        AUTHORIZATION,
        STATE,
        POLICY,
        NOT_FOUND,
        CONFLICT,
        FORMAT,
        RANGE,
        IDENTITY,
        REPLAY,
        USAGE,
    }
)


class ServiceError(Exception):
    """Raised by service operations; never used for programming bugs."""

    def __init__(self, code: str, message: str):
        if code not in ALL_CODES:
            raise ValueError(f"unknown error code: {code}")
        super().__init__(message)
        self.code = code
        self.message = message

    def to_wire(self) -> dict:
        return {"code": self.code, "message": self.message}

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"ServiceError({self.code!r}, {self.message!r})"
