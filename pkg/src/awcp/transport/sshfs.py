"""SSH + FUSE live mount, orchestrated through external commands.

Disabled unless ``AWCP_ENABLE_SSHFS=1``. The delegator half mints an
ephemeral ed25519 key, authorizes it (restricted to sftp) in a configured
``authorized_keys`` file and revokes it on release. The executor half runs
``sshfs`` to mount and ``fusermount -u`` to detach.
"""

from __future__ import annotations

import os
import shutil
import subprocess
import tempfile

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from filelock import FileLock

from ..protocol import READ_ONLY, ErrorCode
from .base import (
    DelegatorSession,
    DelegatorTransport,
    ExecutorSession,
    ExecutorTransport,
    TransportError,
    require_empty_dir,
)
from .handles import LIVE, SSHFS, SshfsHandle
from .workspace import remove_tree

ENABLE_ENV = "AWCP_ENABLE_SSHFS"


def sshfs_enabled() -> bool:
    return os.environ.get(ENABLE_ENV) == "1"


def _marker(delegation_id: str) -> str:
    return f"awcp:{delegation_id}"


def generate_keypair(comment: str) -> tuple[str, str]:
    key = Ed25519PrivateKey.generate()
    private = key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.OpenSSH, serialization.NoEncryption()
    ).decode()
    public = key.public_key().public_bytes(serialization.Encoding.OpenSSH, serialization.PublicFormat.OpenSSH).decode()
    return private, f"{public} {comment}"


class SshfsDelegatorSession(DelegatorSession):
    kind = SSHFS
    capabilities = LIVE

    def __init__(self, handle, authorized_keys: str, marker: str):
        super().__init__(handle)
        self.authorized_keys = authorized_keys
        self.marker = marker

    def _release(self):
        if not os.path.exists(self.authorized_keys):
            return
        with FileLock(self.authorized_keys + ".lock"):
            with open(self.authorized_keys) as f:
                lines = f.readlines()
            kept = [ln for ln in lines if not ln.rstrip().endswith(" " + self.marker)]
            with open(self.authorized_keys, "w") as f:
                f.writelines(kept)

    def state(self):
        return {**super().state(), "authorizedKeys": self.authorized_keys, "marker": self.marker}


class SshfsDelegatorTransport(DelegatorTransport):
    kind = SSHFS
    capabilities = LIVE

    def __init__(self, host: str, user: str, authorized_keys: str, port: int = 22):
        self.host = host
        self.port = port
        self.user = user
        self.authorized_keys = authorized_keys

    def package(self, root, paths, delegation_id, ttl_seconds):
        marker = _marker(delegation_id)
        private, public = generate_keypair(marker)
        line = f'restrict,command="internal-sftp" {public}\n'
        os.makedirs(os.path.dirname(os.path.abspath(self.authorized_keys)), exist_ok=True)
        with FileLock(self.authorized_keys + ".lock"):
            with open(self.authorized_keys, "a") as f:
                f.write(line)
        os.chmod(self.authorized_keys, 0o600)
        handle = SshfsHandle(self.host, self.port, self.user, private, os.path.realpath(root))
        return SshfsDelegatorSession(handle, self.authorized_keys, marker)

    def restore(self, state):
        session = SshfsDelegatorSession(None, state["authorizedKeys"], state["marker"])
        session._restore_flags(state)
        return session


class SshfsExecutorSession(ExecutorSession):
    kind = SSHFS

    def __init__(self, work_dir, capabilities, key_dir: str, unmount_cmd: list[str]):
        super().__init__(work_dir, capabilities)
        self.key_dir = key_dir
        self.unmount_cmd = unmount_cmd

    def _detach(self):
        if os.path.ismount(self.work_dir):
            subprocess.run([*self.unmount_cmd, self.work_dir], check=False, capture_output=True)

    def _release(self):
        remove_tree(self.key_dir)
        if os.path.isdir(self.work_dir) and not os.path.ismount(self.work_dir):
            remove_tree(self.work_dir)


class SshfsExecutorTransport(ExecutorTransport):
    kind = SSHFS
    capabilities = LIVE

    def __init__(self, temp_root: str | None = None, mount_cmd: str = "sshfs", unmount_cmd: tuple[str, ...] = ("fusermount", "-u")):
        self.temp_root = temp_root
        self.mount_cmd = mount_cmd
        self.unmount_cmd = list(unmount_cmd)

    def verify_prerequisites(self):
        if not sshfs_enabled():
            raise TransportError(f"sshfs transport disabled (set {ENABLE_ENV}=1)", ErrorCode.TRANSPORT_UNAVAILABLE)
        for exe in (self.mount_cmd, self.unmount_cmd[0]):
            if shutil.which(exe) is None:
                raise TransportError(f"{exe} not installed", ErrorCode.TRANSPORT_UNAVAILABLE)
        if not os.path.exists("/dev/fuse"):
            raise TransportError("/dev/fuse missing", ErrorCode.TRANSPORT_UNAVAILABLE)

    def provision(self, handle, work_dir, mode):
        if not isinstance(handle, SshfsHandle):
            raise TransportError(f"sshfs transport got a {handle.kind} handle", ErrorCode.MALFORMED_MESSAGE)
        self.verify_prerequisites()
        require_empty_dir(work_dir)
        if self.temp_root:
            os.makedirs(self.temp_root, exist_ok=True)
        key_dir = tempfile.mkdtemp(prefix="awcp-sshkey-", dir=self.temp_root)
        key_path = os.path.join(key_dir, "id_ed25519")
        fd = os.open(key_path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        with os.fdopen(fd, "w") as f:
            f.write(handle.ephemeral_credential)
        opts = [
            f"IdentityFile={key_path}",
            "StrictHostKeyChecking=accept-new",
            "BatchMode=yes",
            f"Port={handle.port}",
        ]
        if mode == READ_ONLY:
            opts.append("ro")
        cmd = [self.mount_cmd, f"{handle.user}@{handle.host}:{handle.remote_path}", work_dir]
        for o in opts:
            cmd += ["-o", o]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            remove_tree(key_dir)
            raise TransportError(f"sshfs mount failed: {proc.stderr.strip()}", ErrorCode.TRANSPORT_UNAVAILABLE)
        return SshfsExecutorSession(work_dir, self.capabilities, key_dir, self.unmount_cmd)
