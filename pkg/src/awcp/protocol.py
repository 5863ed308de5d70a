"""Wire-level message types, lease arithmetic and canonical JSON encoding.

Nothing in here touches the network, the filesystem or a clock; every
function is pure so both services (and alternate implementations) can share
the same definitions.
"""

from __future__ import annotations

import enum
import json
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Any, Union

PROTOCOL_VERSION = "1.0"

READ_ONLY = "read-only"
READ_WRITE = "read-write"
LEASE_MODES = (READ_ONLY, READ_WRITE)
# privilege lattice: narrowing may only move down
_MODE_RANK = {READ_ONLY: 0, READ_WRITE: 1}


class MessageType(str, enum.Enum):
    INVITE = "INVITE"
    ACCEPT = "ACCEPT"
    START = "START"
    DONE = "DONE"
    ERROR = "ERROR"


class ErrorCode(str, enum.Enum):
    """Closed set of machine-readable error codes."""

    DECLINED = "DECLINED"
    DUPLICATE = "DUPLICATE"
    UNKNOWN_DELEGATION = "UNKNOWN_DELEGATION"
    LEASE_EXPIRED = "LEASE_EXPIRED"
    LEASE_VIOLATION = "LEASE_VIOLATION"
    INTEGRITY_MISMATCH = "INTEGRITY_MISMATCH"
    INVALID_TRANSITION = "INVALID_TRANSITION"
    INVALID_STATE = "INVALID_STATE"
    ADMISSION_DENIED = "ADMISSION_DENIED"
    TRANSPORT_UNAVAILABLE = "TRANSPORT_UNAVAILABLE"
    TRANSPORT_FAILED = "TRANSPORT_FAILED"
    MALFORMED_MESSAGE = "MALFORMED_MESSAGE"
    UNKNOWN_TYPE = "UNKNOWN_TYPE"
    UNSUPPORTED_VERSION = "UNSUPPORTED_VERSION"
    BACKEND_FAILED = "BACKEND_FAILED"
    SNAPSHOT_FAILED = "SNAPSHOT_FAILED"
    CANCELLED = "CANCELLED"
    CONNECTION_LOST = "CONNECTION_LOST"
    UNAUTHORIZED = "UNAUTHORIZED"
    SHUTDOWN = "SHUTDOWN"


class AwcpError(Exception):
    """Base exception; always carries a code from :class:`ErrorCode`."""

    default_code = ErrorCode.INVALID_STATE

    def __init__(self, message: str, code: ErrorCode | str | None = None, hint: str | None = None):
        super().__init__(message)
        self.code = ErrorCode(code) if code is not None else self.default_code
        self.message = message
        self.hint = hint

    def to_protocol_error(self) -> "ProtocolError":
        return ProtocolError(self.code.value, self.message, self.hint)

    def __str__(self) -> str:
        return f"{self.code.value}: {self.message}"


class MessageError(AwcpError):
    default_code = ErrorCode.MALFORMED_MESSAGE


class InvalidTransition(AwcpError):
    default_code = ErrorCode.INVALID_TRANSITION


class RemoteError(AwcpError):
    """An ERROR message received from the peer."""

    @classmethod
    def from_protocol_error(cls, err: "ProtocolError") -> "RemoteError":
        return cls(err.message, err.code, err.hint)


# ---------------------------------------------------------------------------
# timestamps


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    if ts.tzinfo is None:
        raise ValueError("timestamps must be timezone-aware")
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_timestamp(text: str) -> datetime:
    if not isinstance(text, str):
        raise MessageError(f"timestamp must be a string, got {type(text).__name__}")
    try:
        ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise MessageError(f"bad timestamp {text!r}") from exc
    if ts.tzinfo is None:
        raise MessageError(f"timestamp {text!r} lacks a timezone")
    return ts.astimezone(timezone.utc)


def new_delegation_id() -> str:
    return f"dlg-{uuid.uuid4().hex}"


# ---------------------------------------------------------------------------
# payload types


def _require(obj: dict, key: str, kind: type | tuple[type, ...]) -> Any:
    if key not in obj:
        raise MessageError(f"missing required field {key!r}")
    value = obj[key]
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise MessageError(f"field {key!r} has wrong type {type(value).__name__}")
    return value


def _optional(obj: dict, key: str, kind: type | tuple[type, ...]) -> Any:
    value = obj.get(key)
    if value is None:
        return None
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise MessageError(f"field {key!r} has wrong type {type(value).__name__}")
    return value


def _check_mode(mode: str) -> str:
    if mode not in LEASE_MODES:
        raise MessageError(f"unknown lease mode {mode!r}")
    return mode


@dataclass(frozen=True)
class MessageEnvelope:
    type: MessageType
    delegation_id: str
    protocol_version: str = PROTOCOL_VERSION

    def __post_init__(self):
        object.__setattr__(self, "type", MessageType(self.type))
        if not self.delegation_id:
            raise MessageError("delegationId must be non-empty")


@dataclass(frozen=True)
class TaskSpec:
    description: str
    agent_prompt: str = ""

    def __post_init__(self):
        if not self.description:
            raise MessageError("task description must be non-empty")

    def to_dict(self) -> dict:
        return {"description": self.description, "agentPrompt": self.agent_prompt}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(_require(d, "description", str), _optional(d, "agentPrompt", str) or "")


@dataclass(frozen=True)
class LeaseConfig:
    ttl_seconds: int
    mode: str = READ_WRITE

    def __post_init__(self):
        if isinstance(self.ttl_seconds, bool) or not isinstance(self.ttl_seconds, int):
            raise MessageError("ttlSeconds must be an integer")
        if self.ttl_seconds < 1:
            raise MessageError("ttlSeconds must be >= 1")
        _check_mode(self.mode)

    def to_dict(self) -> dict:
        return {"ttlSeconds": self.ttl_seconds, "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "LeaseConfig":
        return cls(_require(d, "ttlSeconds", int), _require(d, "mode", str))


def _check_pattern(pattern: str) -> str:
    if not isinstance(pattern, str) or not pattern:
        raise MessageError("resource patterns must be non-empty strings")
    p = pattern.replace("\\", "/")
    if p.startswith("/") or (len(p) > 1 and p[1] == ":"):
        raise MessageError(f"pattern {pattern!r} is absolute")
    if ".." in p.split("/"):
        raise MessageError(f"pattern {pattern!r} escapes the workspace root")
    return pattern


@dataclass(frozen=True)
class EnvironmentDeclaration:
    resources: tuple[str, ...] = (".",)
    excludes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "resources", tuple(self.resources))
        object.__setattr__(self, "excludes", tuple(self.excludes))
        for p in self.resources + self.excludes:
            _check_pattern(p)

    def to_dict(self) -> dict:
        return {"resources": list(self.resources), "excludes": list(self.excludes)}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentDeclaration":
        resources = _require(d, "resources", list)
        excludes = _optional(d, "excludes", list) or []
        return cls(tuple(resources), tuple(excludes))


@dataclass(frozen=True)
class ExecutorConstraints:
    allowed_modes: tuple[str, ...] = LEASE_MODES
    max_ttl_seconds: int | None = None

    def __post_init__(self):
        modes = tuple(self.allowed_modes)
        if not modes:
            raise MessageError("allowedModes must be non-empty")
        for m in modes:
            _check_mode(m)
        object.__setattr__(self, "allowed_modes", modes)
        if self.max_ttl_seconds is not None and (
            isinstance(self.max_ttl_seconds, bool)
            or not isinstance(self.max_ttl_seconds, int)
            or self.max_ttl_seconds < 1
        ):
            raise MessageError("maxTtlSeconds must be a positive integer")

    def to_dict(self) -> dict:
        d: dict = {"allowedModes": list(self.allowed_modes)}
        if self.max_ttl_seconds is not None:
            d["maxTtlSeconds"] = self.max_ttl_seconds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutorConstraints":
        return cls(tuple(_require(d, "allowedModes", list)), _optional(d, "maxTtlSeconds", int))


@dataclass(frozen=True)
class ActiveLease:
    expires_at: datetime
    mode: str = READ_WRITE

    def __post_init__(self):
        if self.expires_at.tzinfo is None:
            raise MessageError("expiresAt must be timezone-aware")
        _check_mode(self.mode)

    def is_expired(self, now: datetime) -> bool:
        return now >= self.expires_at

    def to_dict(self) -> dict:
        return {"expiresAt": format_timestamp(self.expires_at), "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "ActiveLease":
        return cls(parse_timestamp(_require(d, "expiresAt", str)), _require(d, "mode", str))


@dataclass(frozen=True)
class ProtocolError:
    code: str
    message: str
    hint: str | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "code", ErrorCode(self.code).value)
        except ValueError:
            raise MessageError(f"unknown error code {self.code!r}") from None

    def to_dict(self) -> dict:
        d = {"code": self.code, "message": self.message}
        if self.hint is not None:
            d["hint"] = self.hint
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolError":
        return cls(_require(d, "code", str), _require(d, "message", str), _optional(d, "hint", str))


@dataclass(frozen=True)
class InvitePayload:
    task: TaskSpec
    lease: LeaseConfig
    environment: EnvironmentDeclaration
    transport: str

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "lease": self.lease.to_dict(),
            "environment": self.environment.to_dict(),
            "transport": self.transport,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InvitePayload":
        return cls(
            TaskSpec.from_dict(_require(d, "task", dict)),
            LeaseConfig.from_dict(_require(d, "lease", dict)),
            EnvironmentDeclaration.from_dict(_require(d, "environment", dict)),
            _require(d, "transport", str),
        )


@dataclass(frozen=True)
class AcceptPayload:
    work_dir: str
    constraints: ExecutorConstraints = field(default_factory=ExecutorConstraints)

    def to_dict(self) -> dict:
        return {"workDir": self.work_dir, "constraints": self.constraints.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "AcceptPayload":
        return cls(
            _require(d, "workDir", str),
            ExecutorConstraints.from_dict(_require(d, "constraints", dict)),
        )


@dataclass(frozen=True)
class StartPayload:
    lease: ActiveLease
    transport: Any  # a TransportHandle; kept untyped to avoid importing transport here

    def to_dict(self) -> dict:
        return {"lease": self.lease.to_dict(), "transport": self.transport.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "StartPayload":
        from .transport.handles import handle_from_dict

        return cls(
            ActiveLease.from_dict(_require(d, "lease", dict)),
            handle_from_dict(_require(d, "transport", dict)),
        )


@dataclass(frozen=True)
class DonePayload:
    final_summary: str
    highlights: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.final_summary:
            raise MessageError("finalSummary must be non-empty")
        object.__setattr__(self, "highlights", tuple(self.highlights))

    def to_dict(self) -> dict:
        return {"finalSummary": self.final_summary, "highlights": list(self.highlights)}

    @classmethod
    def from_dict(cls, d: dict) -> "DonePayload":
        highlights = _optional(d, "highlights", list) or []
        if not all(isinstance(h, str) for h in highlights):
            raise MessageError("highlights must be strings")
        return cls(_require(d, "finalSummary", str), tuple(highlights))


Payload = Union[InvitePayload, AcceptPayload, StartPayload, DonePayload, ProtocolError]

PAYLOAD_TYPES: dict[MessageType, type] = {
    MessageType.INVITE: InvitePayload,
    MessageType.ACCEPT: AcceptPayload,
    MessageType.START: StartPayload,
    MessageType.DONE: DonePayload,
    MessageType.ERROR: ProtocolError,
}

_HEADER_KEYS = ("protocolVersion", "type", "delegationId")


@dataclass(frozen=True)
class Message:
    envelope: MessageEnvelope
    payload: Payload

    @property
    def type(self) -> MessageType:
        return self.envelope.type

    @property
    def delegation_id(self) -> str:
        return self.envelope.delegation_id

    @classmethod
    def build(cls, type: MessageType | str, delegation_id: str, payload: Payload) -> "Message":
        return cls(MessageEnvelope(MessageType(type), delegation_id), payload)

    @classmethod
    def error(cls, delegation_id: str, code: ErrorCode | str, message: str, hint: str | None = None) -> "Message":
        return cls.build(MessageType.ERROR, delegation_id, ProtocolError(ErrorCode(code).value, message, hint))

    def to_dict(self) -> dict:
        expected = PAYLOAD_TYPES[self.envelope.type]
        if not isinstance(self.payload, expected):
            raise MessageError(
                f"{self.envelope.type.value} expects {expected.__name__}, got {type(self.payload).__name__}"
            )
        body = self.payload.to_dict()
        body.update(
            protocolVersion=self.envelope.protocol_version,
            type=self.envelope.type.value,
            delegationId=self.envelope.delegation_id,
        )
        return body


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_message(message: Message) -> bytes:
    return canonical_json(message.to_dict())


def check_version(version: str) -> None:
    ours = PROTOCOL_VERSION.split(".")[0]
    theirs = str(version).split(".")[0]
    if theirs != ours:
        raise MessageError(
            f"protocol version {version!r} incompatible with {PROTOCOL_VERSION}",
            ErrorCode.UNSUPPORTED_VERSION,
        )


def message_from_dict(obj: Any) -> Message:
    if not isinstance(obj, dict):
        raise MessageError("message must be a JSON object")
    version = _require(obj, "protocolVersion", str)
    check_version(version)
    raw_type = _require(obj, "type", str)
    try:
        mtype = MessageType(raw_type)
    except ValueError:
        raise MessageError(f"unknown message type {raw_type!r}", ErrorCode.UNKNOWN_TYPE) from None
    envelope = MessageEnvelope(mtype, _require(obj, "delegationId", str), version)
    body = {k: v for k, v in obj.items() if k not in _HEADER_KEYS}
    return Message(envelope, PAYLOAD_TYPES[mtype].from_dict(body))


def decode_message(data: bytes | str) -> Message:
    try:
        obj = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MessageError(f"malformed JSON: {exc}") from None
    return message_from_dict(obj)


# ---------------------------------------------------------------------------
# lease arithmetic


def negotiate_lease(proposed: LeaseConfig, constraints: ExecutorConstraints) -> LeaseConfig:
    """Narrow a proposed lease to what the executor allows.

    The ttl is capped at ``max_ttl_seconds`` and read-write is downgraded to
    read-only when the executor does not allow writes. Granting read-only is
    always possible since it never exceeds the proposal.
    """
    if not constraints.allowed_modes:
        raise AwcpError("executor allows no lease mode", ErrorCode.DECLINED)
    ttl = proposed.ttl_seconds
    if constraints.max_ttl_seconds is not None:
        ttl = min(ttl, constraints.max_ttl_seconds)
    if proposed.mode in constraints.allowed_modes or proposed.mode == READ_ONLY:
        mode = proposed.mode
    elif READ_ONLY in constraints.allowed_modes:
        mode = READ_ONLY
    else:  # pragma: no cover - unreachable with a validated mode set
        raise AwcpError("no satisfiable lease mode", ErrorCode.DECLINED)
    return LeaseConfig(ttl, mode)


def mode_at_most(mode: str, ceiling: str) -> bool:
    return _MODE_RANK[mode] <= _MODE_RANK[ceiling]


def activate_lease(effective: LeaseConfig, now: datetime) -> ActiveLease:
    return ActiveLease(now + timedelta(seconds=effective.ttl_seconds), effective.mode)
