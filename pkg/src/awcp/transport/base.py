"""Paired adapter interfaces: one half packages/applies on the delegator, the other provisions/captures on the executor."""

from __future__ import annotations

import abc
import logging
import os
import uuid
from datetime import datetime

from ..protocol import AwcpError, ErrorCode, utc_now
from .handles import SnapshotDescriptor, TransportCapabilities, TransportHandle
from .workspace import IntegrityError, decode_verified, sha256_hex, verify_digest

logger = logging.getLogger(__name__)


class TransportError(AwcpError):
    default_code = ErrorCode.TRANSPORT_FAILED


def new_snapshot_id() -> str:
    return f"snap-{uuid.uuid4().hex[:16]}"


class TwoPhaseCleanup:
    """``detach`` then ``release``; both idempotent, release-before-detach rejected."""

    detached = False
    released = False

    def detach(self) -> None:
        if self.detached:
            return
        self._detach()
        self.detached = True

    def release(self) -> None:
        if self.released:
            return
        if not self.detached:
            raise TransportError("release called before detach", ErrorCode.INVALID_STATE)
        self._release()
        self.released = True

    def teardown(self) -> None:
        self.detach()
        self.release()

    def _detach(self) -> None:
        pass

    def _release(self) -> None:
        pass


class DelegatorSession(TwoPhaseCleanup, abc.ABC):
    """Delegator-side state for one delegation's data channel."""

    kind: str
    capabilities: TransportCapabilities

    def __init__(self, handle: TransportHandle | None):
        self.handle = handle

    def materialize(self, snapshot: SnapshotDescriptor) -> SnapshotDescriptor:
        """Verify a snapshot and return it as an inline (base64 ZIP) descriptor."""
        if not snapshot.inline:
            raise TransportError(f"{self.kind} session cannot resolve {snapshot.data[:40]!r}")
        decode_verified(snapshot.data, snapshot.sha256)
        return snapshot

    def state(self) -> dict:
        """JSON-able state needed to resume or tear down after a crash."""
        return {"kind": self.kind, "detached": self.detached, "released": self.released}

    def _restore_flags(self, state: dict) -> None:
        self.detached = bool(state.get("detached"))
        self.released = bool(state.get("released"))


class DelegatorTransport(abc.ABC):
    kind: str
    capabilities: TransportCapabilities

    @abc.abstractmethod
    def package(self, root: str, paths: list[str], delegation_id: str, ttl_seconds: int) -> DelegatorSession:
        ...

    @abc.abstractmethod
    def restore(self, state: dict) -> DelegatorSession:
        ...


class ExecutorSession(TwoPhaseCleanup, abc.ABC):
    kind: str

    def __init__(self, work_dir: str, capabilities: TransportCapabilities):
        self.work_dir = work_dir
        self.capabilities = capabilities

    def capture_snapshot(self, recommended: bool = False) -> SnapshotDescriptor:
        if not self.capabilities.supports_snapshots:
            raise TransportError(f"{self.kind} is live-sync only; nothing to capture", ErrorCode.SNAPSHOT_FAILED)
        if self.detached:
            raise TransportError("session already detached", ErrorCode.INVALID_STATE)
        return self._capture(new_snapshot_id(), recommended, utc_now())

    def _capture(self, snapshot_id: str, recommended: bool, now: datetime) -> SnapshotDescriptor:
        raise NotImplementedError


class ExecutorTransport(abc.ABC):
    kind: str
    capabilities: TransportCapabilities

    def verify_prerequisites(self) -> None:
        """Raise TransportError(TRANSPORT_UNAVAILABLE) if the host cannot run this transport."""

    @abc.abstractmethod
    def provision(self, handle: TransportHandle, work_dir: str, mode: str) -> ExecutorSession:
        ...


def require_empty_dir(work_dir: str) -> None:
    if not os.path.isdir(work_dir):
        raise TransportError(f"work dir {work_dir} does not exist", ErrorCode.INVALID_STATE)
    if os.listdir(work_dir):
        raise TransportError(f"work dir {work_dir} is not empty", ErrorCode.INVALID_STATE)


__all__ = [
    "DelegatorSession",
    "DelegatorTransport",
    "ExecutorSession",
    "ExecutorTransport",
    "IntegrityError",
    "TransportError",
    "TwoPhaseCleanup",
    "new_snapshot_id",
    "require_empty_dir",
    "sha256_hex",
    "verify_digest",
]
