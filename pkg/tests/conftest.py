from __future__ import annotations

import os
from dataclasses import dataclass

import pytest

from awcp.backends import BackendOutcome, CallableBackend
from awcp.delegator import AUTO, AdmissionPolicy, DelegatorService
from awcp.executor import ExecutorPolicy, ExecutorService
from awcp.protocol import EnvironmentDeclaration, LeaseConfig, TaskSpec
from awcp.transport import default_registry
from awcp.transport.blobstore import BlobStore
from awcp.transport.git import init_bare_remote
from awcp.wire.server import ExecutorServer


def write_tree(root: str, files: dict[str, bytes]) -> str:
    os.makedirs(root, exist_ok=True)
    for rel, data in files.items():
        path = os.path.join(root, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "wb") as f:
            f.write(data)
    return root


def ok_backend(fn=None):
    def run(ctx):
        if fn is not None:
            fn(ctx)
        return BackendOutcome(True, "done")

    return CallableBackend(run)


@dataclass
class Rig:
    """One executor (over real loopback HTTP) and one delegator in a tmp dir."""

    base: str
    executor: ExecutorService
    server: ExecutorServer
    delegator: DelegatorService
    registry: object

    @property
    def url(self) -> str:
        return self.server.url

    def workspace(self, files: dict[str, bytes], name: str = "ws") -> str:
        return write_tree(os.path.join(self.base, name), files)

    def delegate(self, root, task="do it", transport="archive", policy=AUTO, ttl=60, mode="read-write", wait=10.0, env=None):
        rec = self.delegator.delegate(
            TaskSpec(task, task), LeaseConfig(ttl, mode), env or EnvironmentDeclaration(), root, transport, self.url, policy
        )
        if wait:
            rec = self.delegator.wait_terminal(rec.delegation_id, wait)
        return rec

    def wait_released(self, did: str, timeout: float = 5.0) -> None:
        import time

        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            rec = self.executor.records.get(did)
            if rec is None or rec.released:
                return
            time.sleep(0.01)
        raise AssertionError(f"executor never released {did}")

    def close(self):
        self.delegator.close()
        self.server.stop()
        self.executor.close(drain=2.0)


@pytest.fixture(scope="session")
def blob_store():
    store = BlobStore(secret="test-secret").start()
    yield store
    store.stop()


@pytest.fixture(scope="session")
def git_remote(tmp_path_factory):
    return init_bare_remote(str(tmp_path_factory.mktemp("remote") / "remote.git"))


@pytest.fixture
def make_rig(tmp_path, blob_store, git_remote):
    rigs = []

    def build(backend=None, clock=None, scan_interval=0.05, **policy_kw):
        base = str(tmp_path / f"rig{len(rigs)}")
        os.makedirs(base)
        registry = default_registry(os.path.join(base, "tmp"), blob_store.base_url, blob_store.secret, git_remote)
        policy_kw.setdefault("snapshot_interval", None)
        policy_kw.setdefault("tick", 0.02)
        kw = {"clock": clock} if clock else {}
        executor = ExecutorService(
            ExecutorPolicy(os.path.join(base, "exec"), **policy_kw), backend or ok_backend(), registry, **kw
        ).start()
        server = ExecutorServer(executor).start()
        delegator = DelegatorService(
            os.path.join(base, "state"), AdmissionPolicy([base]), registry, scan_interval=scan_interval, **kw
        ).start_scanner()
        rig = Rig(base, executor, server, delegator, registry)
        rigs.append(rig)
        return rig

    yield build
    for rig in rigs:
        rig.close()


# (number, title, passed, detail) for every acceptance criterion that ran
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title} ({detail})")
