"""Transport handles (the per-transport credentials carried in START) and snapshot descriptors."""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import datetime
from typing import ClassVar, Union

from ..protocol import MessageError, _optional, _require, format_timestamp, parse_timestamp

_SHA256_RE = re.compile(r"^[0-9a-f]{64}$")
_GIT_SHA_RE = re.compile(r"^[0-9a-f]{40}([0-9a-f]{24})?$")

ARCHIVE = "archive"
STORAGE = "storage"
GIT = "git"
LOOPBACK = "loopback"
SSHFS = "sshfs"
TRANSPORT_KINDS = (ARCHIVE, STORAGE, GIT, LOOPBACK, SSHFS)


def check_sha256(value: str) -> str:
    if not isinstance(value, str) or not _SHA256_RE.match(value):
        raise MessageError(f"not a sha256 hex digest: {value!r}")
    return value


def branch_for(delegation_id: str) -> str:
    return f"awcp/{delegation_id}"


@dataclass(frozen=True)
class TransportCapabilities:
    live_sync: bool
    supports_snapshots: bool

    def __post_init__(self):
        if not (self.live_sync or self.supports_snapshots):
            raise ValueError("a transport must offer live sync or snapshots")

    def to_dict(self) -> dict:
        return {"liveSync": self.live_sync, "supportsSnapshots": self.supports_snapshots}

    @classmethod
    def from_dict(cls, d: dict) -> "TransportCapabilities":
        return cls(bool(d["liveSync"]), bool(d["supportsSnapshots"]))


LIVE = TransportCapabilities(live_sync=True, supports_snapshots=False)
SNAPSHOTS = TransportCapabilities(live_sync=False, supports_snapshots=True)


@dataclass(frozen=True)
class ArchiveHandle:
    kind: ClassVar[str] = ARCHIVE
    data_base64: str
    sha256: str

    def __post_init__(self):
        check_sha256(self.sha256)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dataBase64": self.data_base64, "sha256": self.sha256}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchiveHandle":
        return cls(_require(d, "dataBase64", str), _require(d, "sha256", str))


@dataclass(frozen=True)
class StorageHandle:
    kind: ClassVar[str] = STORAGE
    download_url: str
    upload_url: str
    sha256: str

    def __post_init__(self):
        check_sha256(self.sha256)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "downloadUrl": self.download_url,
            "uploadUrl": self.upload_url,
            "sha256": self.sha256,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StorageHandle":
        return cls(_require(d, "downloadUrl", str), _require(d, "uploadUrl", str), _require(d, "sha256", str))


@dataclass(frozen=True)
class GitHandle:
    kind: ClassVar[str] = GIT
    remote_url: str
    branch: str
    base_commit: str

    def __post_init__(self):
        if not _GIT_SHA_RE.match(self.base_commit):
            raise MessageError(f"not a git commit id: {self.base_commit!r}")
        if not self.branch.startswith("awcp/"):
            raise MessageError(f"git branch must live under awcp/, got {self.branch!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "remoteUrl": self.remote_url,
            "branch": self.branch,
            "baseCommit": self.base_commit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GitHandle":
        return cls(_require(d, "remoteUrl", str), _require(d, "branch", str), _require(d, "baseCommit", str))


@dataclass(frozen=True)
class SshfsHandle:
    kind: ClassVar[str] = SSHFS
    host: str
    port: int
    user: str
    ephemeral_credential: str
    remote_path: str

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "host": self.host,
            "port": self.port,
            "user": self.user,
            "ephemeralCredential": self.ephemeral_credential,
            "remotePath": self.remote_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SshfsHandle":
        return cls(
            _require(d, "host", str),
            _require(d, "port", int),
            _require(d, "user", str),
            _require(d, "ephemeralCredential", str),
            _require(d, "remotePath", str),
        )


@dataclass(frozen=True)
class LoopbackHandle:
    """Same-host live projection: the executor links its work dir to ``path``."""

    kind: ClassVar[str] = LOOPBACK
    path: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "path": self.path}

    @classmethod
    def from_dict(cls, d: dict) -> "LoopbackHandle":
        return cls(_require(d, "path", str))


TransportHandle = Union[ArchiveHandle, StorageHandle, GitHandle, SshfsHandle, LoopbackHandle]

_HANDLE_TYPES = {cls.kind: cls for cls in (ArchiveHandle, StorageHandle, GitHandle, SshfsHandle, LoopbackHandle)}


def handle_from_dict(d: dict) -> TransportHandle:
    kind = _require(d, "kind", str)
    try:
        cls = _HANDLE_TYPES[kind]
    except KeyError:
        raise MessageError(f"unknown transport kind {kind!r}") from None
    return cls.from_dict(d)


@dataclass(frozen=True)
class SnapshotDescriptor:
    """An archived executor-side workspace state.

    ``data`` is base64 ZIP bytes for inline snapshots, ``storage:<key>`` for
    blobs left in object storage and ``git:<commit>`` for git commits. For git
    snapshots ``sha256`` holds the commit id instead of a digest.
    """

    snapshot_id: str
    data: str
    sha256: str
    recommended: bool
    captured_at: datetime

    @property
    def inline(self) -> bool:
        return ":" not in self.data

    @property
    def reference(self) -> tuple[str, str] | None:
        if self.inline:
            return None
        scheme, _, rest = self.data.partition(":")
        return scheme, rest

    def to_dict(self) -> dict:
        return {
            "snapshotId": self.snapshot_id,
            "data": self.data,
            "sha256": self.sha256,
            "recommended": self.recommended,
            "capturedAt": format_timestamp(self.captured_at),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SnapshotDescriptor":
        recommended = d.get("recommended", False)
        if not isinstance(recommended, bool):
            raise MessageError("recommended must be a boolean")
        return cls(
            _require(d, "snapshotId", str),
            _optional(d, "data", str) or "",
            _require(d, "sha256", str),
            recommended,
            parse_timestamp(_require(d, "capturedAt", str)),
        )
