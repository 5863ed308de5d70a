"""Inline ZIP transport: the workspace travels base64-encoded inside START."""

from __future__ import annotations

from datetime import datetime

from ..protocol import READ_ONLY, ErrorCode
from .base import (
    DelegatorSession,
    DelegatorTransport,
    ExecutorSession,
    ExecutorTransport,
    TransportError,
    require_empty_dir,
)
from .handles import ARCHIVE, SNAPSHOTS, ArchiveHandle, SnapshotDescriptor
from .workspace import (
    build_archive,
    decode_verified,
    encode_b64,
    extract_archive,
    remove_tree,
    set_read_only,
    sha256_hex,
    walk_files,
)

# base64 payload cap; bigger workspaces should go through storage or git
MAX_INLINE_BYTES = 64 * 1024 * 1024


class ArchiveDelegatorSession(DelegatorSession):
    kind = ARCHIVE
    capabilities = SNAPSHOTS


class ArchiveDelegatorTransport(DelegatorTransport):
    kind = ARCHIVE
    capabilities = SNAPSHOTS

    def __init__(self, max_inline_bytes: int = MAX_INLINE_BYTES):
        self.max_inline_bytes = max_inline_bytes

    def package(self, root, paths, delegation_id, ttl_seconds):
        data = build_archive(root, paths)
        encoded = encode_b64(data)
        if len(encoded) > self.max_inline_bytes:
            raise TransportError(
                f"inline archive is {len(encoded)} bytes, cap is {self.max_inline_bytes}",
                ErrorCode.ADMISSION_DENIED,
                hint="use the storage or git transport for large workspaces",
            )
        return ArchiveDelegatorSession(ArchiveHandle(encoded, sha256_hex(data)))

    def restore(self, state):
        session = ArchiveDelegatorSession(None)
        session._restore_flags(state)
        return session


def capture_inline(work_dir: str, snapshot_id: str, recommended: bool, now: datetime) -> tuple[SnapshotDescriptor, bytes]:
    data = build_archive(work_dir, walk_files(work_dir))
    return SnapshotDescriptor(snapshot_id, encode_b64(data), sha256_hex(data), recommended, now), data


class ArchiveExecutorSession(ExecutorSession):
    kind = ARCHIVE

    def _capture(self, snapshot_id, recommended, now):
        return capture_inline(self.work_dir, snapshot_id, recommended, now)[0]

    def _release(self):
        remove_tree(self.work_dir)


class ArchiveExecutorTransport(ExecutorTransport):
    kind = ARCHIVE
    capabilities = SNAPSHOTS

    def provision(self, handle, work_dir, mode):
        if not isinstance(handle, ArchiveHandle):
            raise TransportError(f"archive transport got a {handle.kind} handle", ErrorCode.MALFORMED_MESSAGE)
        require_empty_dir(work_dir)
        raw = decode_verified(handle.data_base64, handle.sha256)
        extract_archive(raw, work_dir)
        if mode == READ_ONLY:
            set_read_only(work_dir)
        return ArchiveExecutorSession(work_dir, self.capabilities)
