"""Object-storage transport: ZIP blobs exchanged through pre-signed URLs."""

from __future__ import annotations

import httpx

from ..protocol import READ_ONLY, ErrorCode
from ..wire.http import make_client
from .archive import capture_inline
from .base import (
    DelegatorSession,
    DelegatorTransport,
    ExecutorSession,
    ExecutorTransport,
    TransportError,
    require_empty_dir,
)
from .blobstore import child_url, key_of, presign
from .handles import SNAPSHOTS, STORAGE, SnapshotDescriptor, StorageHandle
from .workspace import (
    build_archive,
    encode_b64,
    extract_archive,
    remove_tree,
    set_read_only,
    sha256_hex,
    verify_digest,
)

# slack on top of the lease so URLs outlive a lease that runs to the last second
URL_TTL_MARGIN = 300


def _client() -> httpx.Client:
    return make_client(timeout=30.0)


def _put(url: str, data: bytes) -> None:
    try:
        with _client() as c:
            r = c.put(url, content=data)
    except httpx.HTTPError as exc:
        raise TransportError(f"upload failed: {exc}", ErrorCode.TRANSPORT_FAILED) from None
    if r.status_code >= 300:
        raise TransportError(f"upload rejected with HTTP {r.status_code}", ErrorCode.TRANSPORT_FAILED)


def _get(url: str) -> bytes:
    try:
        with _client() as c:
            r = c.get(url)
    except httpx.HTTPError as exc:
        raise TransportError(f"download failed: {exc}", ErrorCode.TRANSPORT_UNAVAILABLE) from None
    if r.status_code != 200:
        raise TransportError(f"download rejected with HTTP {r.status_code}", ErrorCode.TRANSPORT_FAILED)
    return r.content


class StorageDelegatorSession(DelegatorSession):
    kind = STORAGE
    capabilities = SNAPSHOTS

    def __init__(self, handle, transport: "StorageDelegatorTransport", prefix: str):
        super().__init__(handle)
        self.transport = transport
        self.prefix = prefix

    def materialize(self, snapshot: SnapshotDescriptor) -> SnapshotDescriptor:
        ref = snapshot.reference
        if ref is None:
            return super().materialize(snapshot)
        scheme, key = ref
        if scheme != "storage" or not key.startswith(self.prefix):
            raise TransportError(f"snapshot reference {snapshot.data!r} is outside this delegation", ErrorCode.INTEGRITY_MISMATCH)
        raw = _get(self.transport.presign("GET", key, URL_TTL_MARGIN))
        verify_digest(raw, snapshot.sha256)
        return SnapshotDescriptor(snapshot.snapshot_id, encode_b64(raw), snapshot.sha256, snapshot.recommended, snapshot.captured_at)

    def _release(self):
        url = self.transport.presign("DELETE", self.prefix, URL_TTL_MARGIN)
        try:
            with _client() as c:
                r = c.delete(url)
        except httpx.HTTPError as exc:
            raise TransportError(f"could not delete blobs under {self.prefix}: {exc}") from None
        if r.status_code >= 300:
            raise TransportError(f"blob cleanup rejected with HTTP {r.status_code}")

    def state(self):
        return {**super().state(), "prefix": self.prefix}


class StorageDelegatorTransport(DelegatorTransport):
    kind = STORAGE
    capabilities = SNAPSHOTS

    def __init__(self, base_url: str, secret: str):
        self.base_url = base_url
        self.secret = secret

    def presign(self, method: str, key: str, ttl: float) -> str:
        return presign(self.base_url, self.secret, method, key, ttl)

    def package(self, root, paths, delegation_id, ttl_seconds):
        prefix = f"awcp/{delegation_id}/"
        data = build_archive(root, paths)
        ttl = ttl_seconds + URL_TTL_MARGIN
        _put(self.presign("PUT", prefix + "workspace.zip", ttl), data)
        handle = StorageHandle(
            download_url=self.presign("GET", prefix + "workspace.zip", ttl),
            upload_url=self.presign("PUT", prefix + "snapshots/", ttl),
            sha256=sha256_hex(data),
        )
        return StorageDelegatorSession(handle, self, prefix)

    def restore(self, state):
        session = StorageDelegatorSession(None, self, state["prefix"])
        session._restore_flags(state)
        return session


class StorageExecutorSession(ExecutorSession):
    kind = STORAGE

    def __init__(self, work_dir, capabilities, upload_url: str):
        super().__init__(work_dir, capabilities)
        self.upload_url = upload_url

    def _capture(self, snapshot_id, recommended, now):
        inline, data = capture_inline(self.work_dir, snapshot_id, recommended, now)
        url = child_url(self.upload_url, f"{snapshot_id}.zip")
        _put(url, data)
        return SnapshotDescriptor(snapshot_id, f"storage:{key_of(url)}", inline.sha256, recommended, now)

    def _release(self):
        remove_tree(self.work_dir)


class StorageExecutorTransport(ExecutorTransport):
    kind = STORAGE
    capabilities = SNAPSHOTS

    def provision(self, handle, work_dir, mode):
        if not isinstance(handle, StorageHandle):
            raise TransportError(f"storage transport got a {handle.kind} handle", ErrorCode.MALFORMED_MESSAGE)
        require_empty_dir(work_dir)
        raw = _get(handle.download_url)
        verify_digest(raw, handle.sha256)
        extract_archive(raw, work_dir)
        if mode == READ_ONLY:
            set_read_only(work_dir)
        return StorageExecutorSession(work_dir, self.capabilities, handle.upload_url)
