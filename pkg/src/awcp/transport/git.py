"""Branch-based transport: each snapshot is a commit on ``awcp/<delegationId>``."""

from __future__ import annotations

import io
import os
import shutil
import subprocess
import tarfile
import tempfile

from ..protocol import READ_ONLY, ErrorCode
from .base import (
    DelegatorSession,
    DelegatorTransport,
    ExecutorSession,
    ExecutorTransport,
    TransportError,
    require_empty_dir,
)
from .handles import GIT, SNAPSHOTS, GitHandle, SnapshotDescriptor, branch_for
from .workspace import (
    IntegrityError,
    build_archive_from_entries,
    encode_b64,
    remove_tree,
    sha256_hex,
)

_GIT_ENV = {
    "GIT_CONFIG_NOSYSTEM": "1",
    "GIT_TERMINAL_PROMPT": "0",
    "GIT_AUTHOR_NAME": "awcp",
    "GIT_AUTHOR_EMAIL": "awcp@localhost",
    "GIT_COMMITTER_NAME": "awcp",
    "GIT_COMMITTER_EMAIL": "awcp@localhost",
}
_GIT_OPTS = ["-c", "commit.gpgsign=false", "-c", "core.hooksPath=/dev/null", "-c", "init.defaultBranch=awcp-base"]


def git(*args: str, cwd: str | None = None, check: bool = True, capture_bytes: bool = False) -> subprocess.CompletedProcess:
    env = {**os.environ, **_GIT_ENV}
    proc = subprocess.run(
        ["git", *_GIT_OPTS, *args],
        cwd=cwd,
        env=env,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=not capture_bytes,
    )
    if check and proc.returncode != 0:
        err = proc.stderr if isinstance(proc.stderr, str) else proc.stderr.decode(errors="replace")
        raise TransportError(f"git {' '.join(args[:2])} failed: {err.strip()}", ErrorCode.TRANSPORT_FAILED)
    return proc


def _rev_parse(cwd: str, rev: str = "HEAD") -> str:
    return git("rev-parse", rev, cwd=cwd).stdout.strip()


def remote_branches(remote_url: str, pattern: str = "refs/heads/awcp/*") -> list[str]:
    out = git("ls-remote", remote_url, pattern).stdout
    return sorted(line.split("\t", 1)[1][len("refs/heads/"):] for line in out.splitlines() if "\t" in line)


def init_bare_remote(path: str) -> str:
    """Create a bare repository usable as a test remote; returns its URL (a path)."""
    git("init", "-q", "--bare", path)
    return path


def commit_entries(commit: str, cwd: str) -> dict[str, tuple[bool, bytes]]:
    """Read every file of a commit as ``{path: (is_symlink, content)}``."""
    raw = git("archive", "--format=tar", commit, cwd=cwd, capture_bytes=True).stdout
    files: dict[str, tuple[bool, bytes]] = {}
    with tarfile.open(fileobj=io.BytesIO(raw)) as tar:
        for member in tar.getmembers():
            if member.issym():
                files[member.name] = (True, member.linkname.encode())
            elif member.isfile():
                f = tar.extractfile(member)
                files[member.name] = (False, f.read() if f else b"")
    return files


def _copy_into(root: str, paths: list[str], dest: str) -> None:
    for rel in paths:
        src = os.path.join(root, rel)
        target = os.path.join(dest, rel)
        os.makedirs(os.path.dirname(target), exist_ok=True)
        shutil.copy2(src, target, follow_symlinks=False)


class GitDelegatorSession(DelegatorSession):
    kind = GIT
    capabilities = SNAPSHOTS

    def __init__(self, handle, clone_dir: str, remote_url: str, branch: str):
        super().__init__(handle)
        self.clone_dir = clone_dir
        self.remote_url = remote_url
        self.branch = branch

    def materialize(self, snapshot: SnapshotDescriptor) -> SnapshotDescriptor:
        ref = snapshot.reference
        if ref is None:
            return super().materialize(snapshot)
        scheme, commit = ref
        if scheme != "git" or commit != snapshot.sha256:
            raise IntegrityError(f"git snapshot reference {snapshot.data!r} does not match {snapshot.sha256}")
        git("fetch", "-q", self.remote_url, f"refs/heads/{self.branch}", cwd=self.clone_dir)
        probe = git("cat-file", "-t", commit, cwd=self.clone_dir, check=False)
        if probe.returncode != 0 or probe.stdout.strip() != "commit":
            raise IntegrityError(f"commit {commit} not found on {self.branch}")
        data = build_archive_from_entries(commit_entries(commit, self.clone_dir))
        return SnapshotDescriptor(snapshot.snapshot_id, encode_b64(data), sha256_hex(data), snapshot.recommended, snapshot.captured_at)

    def _release(self):
        if self.branch in remote_branches(self.remote_url, f"refs/heads/{self.branch}"):
            git("push", "-q", self.remote_url, "--delete", f"refs/heads/{self.branch}")
        remove_tree(self.clone_dir)

    def state(self):
        return {**super().state(), "cloneDir": self.clone_dir, "remoteUrl": self.remote_url, "branch": self.branch}


class GitDelegatorTransport(DelegatorTransport):
    kind = GIT
    capabilities = SNAPSHOTS

    def __init__(self, remote_url: str, temp_root: str | None = None):
        self.remote_url = remote_url
        self.temp_root = temp_root

    def package(self, root, paths, delegation_id, ttl_seconds):
        branch = branch_for(delegation_id)
        if self.temp_root:
            os.makedirs(self.temp_root, exist_ok=True)
        clone_dir = tempfile.mkdtemp(prefix="awcp-git-", dir=self.temp_root)
        try:
            git("init", "-q", cwd=clone_dir)
            git("checkout", "-q", "--orphan", branch, cwd=clone_dir)
            _copy_into(root, paths, clone_dir)
            git("add", "-A", "-f", cwd=clone_dir)
            git("commit", "-q", "--allow-empty", "-m", f"awcp: workspace for {delegation_id}", cwd=clone_dir)
            git("push", "-q", self.remote_url, f"HEAD:refs/heads/{branch}", cwd=clone_dir)
            base = _rev_parse(clone_dir)
        except Exception:
            remove_tree(clone_dir)
            raise
        return GitDelegatorSession(GitHandle(self.remote_url, branch, base), clone_dir, self.remote_url, branch)

    def restore(self, state):
        session = GitDelegatorSession(None, state["cloneDir"], state["remoteUrl"], state["branch"])
        session._restore_flags(state)
        return session


class GitExecutorSession(ExecutorSession):
    kind = GIT

    def __init__(self, work_dir, capabilities, branch: str):
        super().__init__(work_dir, capabilities)
        self.branch = branch

    def _capture(self, snapshot_id, recommended, now):
        git("add", "-A", "-f", cwd=self.work_dir)
        git("commit", "-q", "--allow-empty", "-m", f"awcp snapshot {snapshot_id}", cwd=self.work_dir)
        git("push", "-q", "origin", f"HEAD:refs/heads/{self.branch}", cwd=self.work_dir)
        commit = _rev_parse(self.work_dir)
        return SnapshotDescriptor(snapshot_id, f"git:{commit}", commit, recommended, now)

    def _release(self):
        remove_tree(self.work_dir)


class GitExecutorTransport(ExecutorTransport):
    kind = GIT
    capabilities = SNAPSHOTS

    def verify_prerequisites(self):
        if shutil.which("git") is None:
            raise TransportError("git client not installed", ErrorCode.TRANSPORT_UNAVAILABLE)

    def provision(self, handle, work_dir, mode):
        if not isinstance(handle, GitHandle):
            raise TransportError(f"git transport got a {handle.kind} handle", ErrorCode.MALFORMED_MESSAGE)
        require_empty_dir(work_dir)
        git("clone", "-q", "--single-branch", "--branch", handle.branch, handle.remote_url, work_dir)
        head = _rev_parse(work_dir)
        if head != handle.base_commit:
            raise IntegrityError(f"branch {handle.branch} is at {head}, expected {handle.base_commit}")
        if mode == READ_ONLY:
            for rel in git("ls-files", "-z", cwd=work_dir).stdout.split("\0"):
                p = os.path.join(work_dir, rel)
                if rel and os.path.isfile(p) and not os.path.islink(p):
                    os.chmod(p, 0o444)
        return GitExecutorSession(work_dir, self.capabilities, handle.branch)

