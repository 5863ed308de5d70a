"""Pluggable workspace transports.

Each transport is a pair: a :class:`DelegatorTransport` that packages the
workspace into a handle and resolves returned snapshots, and an
:class:`ExecutorTransport` that provisions a work dir from the handle and
captures snapshots. :class:`TransportRegistry` maps kind names to configured
adapter instances.
"""

from __future__ import annotations

from typing import Iterable

from ..protocol import READ_WRITE, AwcpError, EnvironmentDeclaration, ErrorCode
from .archive import ArchiveDelegatorTransport, ArchiveExecutorTransport
from .base import (
    DelegatorSession,
    DelegatorTransport,
    ExecutorSession,
    ExecutorTransport,
    TransportError,
)
from .git import GitDelegatorTransport, GitExecutorTransport
from .handles import (
    ARCHIVE,
    GIT,
    LOOPBACK,
    SSHFS,
    STORAGE,
    TRANSPORT_KINDS,
    SnapshotDescriptor,
    TransportCapabilities,
    TransportHandle,
    handle_from_dict,
)
from .loopback import LoopbackDelegatorTransport, LoopbackExecutorTransport
from .sshfs import SshfsExecutorTransport
from .storage import StorageDelegatorTransport, StorageExecutorTransport
from .workspace import (
    ChangeSummary,
    IntegrityError,
    WorkspaceManifest,
    apply_archive,
    build_manifest,
    decode_verified,
    resolve_environment,
)


class TransportRegistry:
    def __init__(self):
        self._delegator: dict[str, DelegatorTransport] = {}
        self._executor: dict[str, ExecutorTransport] = {}

    def register(self, delegator: DelegatorTransport | None = None, executor: ExecutorTransport | None = None) -> None:
        if delegator is not None:
            self._delegator[delegator.kind] = delegator
        if executor is not None:
            self._executor[executor.kind] = executor

    def delegator(self, kind: str) -> DelegatorTransport:
        try:
            return self._delegator[kind]
        except KeyError:
            raise TransportError(f"no delegator transport configured for {kind!r}", ErrorCode.TRANSPORT_UNAVAILABLE) from None

    def executor(self, kind: str) -> ExecutorTransport:
        try:
            return self._executor[kind]
        except KeyError:
            raise TransportError(f"no executor transport configured for {kind!r}", ErrorCode.TRANSPORT_UNAVAILABLE) from None

    @property
    def delegator_kinds(self) -> list[str]:
        return sorted(self._delegator)

    @property
    def executor_kinds(self) -> list[str]:
        return sorted(self._executor)


def default_registry(
    temp_root: str | None = None,
    blob_store_url: str | None = None,
    blob_store_secret: str | None = None,
    git_remote: str | None = None,
) -> TransportRegistry:
    """Registry with archive and loopback always on; storage and git when configured.

    The executor halves of storage and git need no configuration (the handle
    carries everything), so they are always registered.
    """
    reg = TransportRegistry()
    reg.register(ArchiveDelegatorTransport(), ArchiveExecutorTransport())
    reg.register(LoopbackDelegatorTransport(), LoopbackExecutorTransport())
    reg.register(executor=StorageExecutorTransport())
    reg.register(executor=GitExecutorTransport())
    reg.register(executor=SshfsExecutorTransport(temp_root=temp_root))
    if blob_store_url:
        reg.register(delegator=StorageDelegatorTransport(blob_store_url, blob_store_secret or ""))
    if git_remote:
        reg.register(delegator=GitDelegatorTransport(git_remote, temp_root=temp_root))
    return reg


def package_workspace(
    root: str,
    env: EnvironmentDeclaration,
    kind: str,
    delegation_id: str,
    registry: TransportRegistry,
    ttl_seconds: int = 3600,
) -> DelegatorSession:
    """Package the declared file set; the returned session carries ``.handle``."""
    paths = resolve_environment(root, env)
    return registry.delegator(kind).package(root, paths, delegation_id, ttl_seconds)


def provision_workspace(handle: TransportHandle, work_dir: str, registry: TransportRegistry, mode: str = READ_WRITE) -> ExecutorSession:
    adapter = registry.executor(handle.kind)
    adapter.verify_prerequisites()
    return adapter.provision(handle, work_dir, mode)


def capture_snapshot(session: ExecutorSession, recommended: bool = False) -> SnapshotDescriptor:
    return session.capture_snapshot(recommended)


def apply_snapshot(root: str, snapshot: SnapshotDescriptor, mode: str, scope: Iterable[str]) -> ChangeSummary:
    """Apply an inline snapshot to the delegator workspace.

    ``scope`` lists the paths the delegation projected; only those may be
    deleted. Read-only leases refuse application outright.
    """
    if mode != READ_WRITE:
        raise AwcpError("read-only lease: snapshot application refused", ErrorCode.LEASE_VIOLATION)
    if not snapshot.inline:
        raise TransportError("snapshot must be materialized before it is applied", ErrorCode.INVALID_STATE)
    raw = decode_verified(snapshot.data, snapshot.sha256)
    return apply_archive(root, raw, scope)


__all__ = [
    "ARCHIVE",
    "GIT",
    "LOOPBACK",
    "SSHFS",
    "STORAGE",
    "TRANSPORT_KINDS",
    "ChangeSummary",
    "DelegatorSession",
    "DelegatorTransport",
    "ExecutorSession",
    "ExecutorTransport",
    "IntegrityError",
    "SnapshotDescriptor",
    "TransportCapabilities",
    "TransportError",
    "TransportHandle",
    "TransportRegistry",
    "WorkspaceManifest",
    "apply_snapshot",
    "build_manifest",
    "capture_snapshot",
    "default_registry",
    "handle_from_dict",
    "package_workspace",
    "provision_workspace",
    "resolve_environment",
]
