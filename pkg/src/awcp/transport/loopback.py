"""Same-host live projection.

The executor's work dir becomes a symlink to the delegator's workspace root,
so every write lands at the origin immediately. It stands in for an sshfs
mount wherever FUSE and SSH are unavailable, and exercises the same
live-sync code paths.
"""

from __future__ import annotations

import os

from ..protocol import READ_ONLY, ErrorCode
from .base import (
    DelegatorSession,
    DelegatorTransport,
    ExecutorSession,
    ExecutorTransport,
    TransportError,
    require_empty_dir,
)
from .handles import LIVE, LOOPBACK, LoopbackHandle


class LoopbackDelegatorSession(DelegatorSession):
    kind = LOOPBACK
    capabilities = LIVE


class LoopbackDelegatorTransport(DelegatorTransport):
    kind = LOOPBACK
    capabilities = LIVE

    def package(self, root, paths, delegation_id, ttl_seconds):
        return LoopbackDelegatorSession(LoopbackHandle(os.path.realpath(root)))

    def restore(self, state):
        session = LoopbackDelegatorSession(None)
        session._restore_flags(state)
        return session


class LoopbackExecutorSession(ExecutorSession):
    kind = LOOPBACK

    def _detach(self):
        if os.path.islink(self.work_dir):
            os.unlink(self.work_dir)

    def _release(self):
        if os.path.islink(self.work_dir):
            os.unlink(self.work_dir)
        elif os.path.isdir(self.work_dir):
            os.rmdir(self.work_dir)


class LoopbackExecutorTransport(ExecutorTransport):
    kind = LOOPBACK
    capabilities = LIVE

    def provision(self, handle, work_dir, mode):
        if not isinstance(handle, LoopbackHandle):
            raise TransportError(f"loopback transport got a {handle.kind} handle", ErrorCode.MALFORMED_MESSAGE)
        if mode == READ_ONLY:
            # a symlink cannot drop write permission without touching the origin
            raise TransportError(
                "loopback projection cannot enforce a read-only lease",
                ErrorCode.TRANSPORT_UNAVAILABLE,
                hint="use archive, storage or git for read-only delegations",
            )
        if not os.path.isdir(handle.path):
            raise TransportError(f"projection source {handle.path} is not a directory", ErrorCode.TRANSPORT_UNAVAILABLE)
        require_empty_dir(work_dir)
        os.rmdir(work_dir)
        os.symlink(handle.path, work_dir, target_is_directory=True)
        return LoopbackExecutorSession(work_dir, self.capabilities)
