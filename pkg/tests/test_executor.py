from __future__ import annotations

import os
import time
from datetime import timedelta

import pytest

from awcp.backends import BackendOutcome, CallableBackend, CommandBackend
from awcp.executor import ExecutorPolicy, ExecutorService
from awcp.lifecycle import AssignmentState
from awcp.protocol import (
    READ_ONLY,
    ActiveLease,
    AwcpError,
    EnvironmentDeclaration,
    ErrorCode,
    InvitePayload,
    LeaseConfig,
    Message,
    MessageType,
    StartPayload,
    TaskSpec,
    activate_lease,
    utc_now,
)
from awcp.transport import default_registry, package_workspace
from awcp.transport.handles import ARCHIVE, GIT, LOOPBACK
from awcp.transport.workspace import build_manifest

from conftest import ok_backend, write_tree

FILES = {"a.txt": b"alpha\n", "sub/b.txt": b"beta\n"}


@pytest.fixture
def registry(tmp_path, blob_store, git_remote):
    return default_registry(str(tmp_path / "tmp"), blob_store.base_url, blob_store.secret, git_remote)


@pytest.fixture
def service(tmp_path, registry):
    made = []

    def build(backend=None, **kw):
        kw.setdefault("snapshot_interval", None)
        kw.setdefault("tick", 0.02)
        svc = ExecutorService(ExecutorPolicy(str(tmp_path / f"exec{len(made)}"), **kw), backend or ok_backend(), registry)
        made.append(svc)
        return svc

    yield build
    for svc in made:
        svc.close(drain=1.0)


def invite(did, ttl=60, mode="read-write", transport=ARCHIVE):
    return Message.build(MessageType.INVITE, did, InvitePayload(TaskSpec("t"), LeaseConfig(ttl, mode), EnvironmentDeclaration(), transport))


def start_msg(did, src, registry, ttl=60, mode="read-write", transport=ARCHIVE, lease=None):
    session = package_workspace(src, EnvironmentDeclaration(), transport, did, registry)
    lease = lease or activate_lease(LeaseConfig(ttl, mode), utc_now())
    return Message.build(MessageType.START, did, StartPayload(lease, session.handle)), session


def events_of(svc, did):
    return [e.event_name for e in svc.logs[did].events]


def wait_until(pred, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(0.01)
    return False


def test_accept_carries_max_ttl(service):
    svc = service(max_ttl_seconds=30)
    reply = svc.handle_invite(invite("cap", ttl=3600))
    assert reply.type is MessageType.ACCEPT
    assert reply.payload.constraints.max_ttl_seconds == 30
    assert svc.records["cap"].effective_lease.ttl_seconds == 30
    assert os.path.isdir(reply.payload.work_dir)


def test_unsupported_transport_declined_without_workdir(service):
    svc = service(accepted_transport_kinds=(ARCHIVE,))
    reply = svc.handle_invite(invite("g", transport=GIT))
    assert reply.type is MessageType.ERROR and reply.payload.code == "DECLINED"
    assert os.listdir(svc.policy.work_dir_base) == []


def test_capacity_declined(service):
    svc = service(max_concurrent_assignments=1)
    assert svc.handle_invite(invite("one")).type is MessageType.ACCEPT
    reply = svc.handle_invite(invite("two"))
    assert reply.payload.code == "DECLINED"
    assert os.listdir(svc.policy.work_dir_base) == ["one"]


def test_duplicate_invite(service):
    svc = service()
    svc.handle_invite(invite("dup"))
    assert svc.handle_invite(invite("dup")).payload.code == "DUPLICATE"


def test_bad_delegation_id(service):
    svc = service()
    assert svc.handle_invite(invite("../etc")).payload.code == "MALFORMED_MESSAGE"


def test_loopback_read_only_declined(service):
    svc = service()
    reply = svc.handle_invite(invite("lro", mode=READ_ONLY, transport=LOOPBACK))
    assert reply.payload.code == "DECLINED"


def test_read_only_executor_downgrades_mode(service):
    svc = service(allowed_modes=(READ_ONLY,))
    svc.handle_invite(invite("ro"))
    assert svc.records["ro"].effective_lease.mode == READ_ONLY


def test_start_lease_over_cap_is_violation(service, registry, tmp_path):
    svc = service()
    src = write_tree(str(tmp_path / "src"), FILES)
    svc.handle_invite(invite("over", ttl=60))
    work = svc.records["over"].work_dir
    lease = ActiveLease(utc_now() + timedelta(hours=1))
    msg, _ = start_msg("over", src, registry, lease=lease)
    reply = svc.handle_start(msg)
    assert reply.payload.code == "LEASE_VIOLATION"
    assert svc.records["over"].state is AssignmentState.ERROR
    assert not os.path.exists(work)


def test_start_mode_escalation_is_violation(service, registry, tmp_path):
    svc = service()
    src = write_tree(str(tmp_path / "src"), FILES)
    svc.handle_invite(invite("esc", mode=READ_ONLY))
    msg, _ = start_msg("esc", src, registry, mode="read-write")
    assert svc.handle_start(msg).payload.code == "LEASE_VIOLATION"


def test_start_twice_is_invalid_state(service, registry, tmp_path):
    svc = service(CallableBackend(lambda ctx: ctx.cancelled.wait(5) and None))
    src = write_tree(str(tmp_path / "src"), FILES)
    svc.handle_invite(invite("twice"))
    msg, _ = start_msg("twice", src, registry)
    assert svc.handle_start(msg) is None
    with pytest.raises(AwcpError) as info:
        svc.handle_start(msg)
    assert info.value.code is ErrorCode.INVALID_STATE


def test_ack_before_terminal_rejected(service):
    svc = service()
    svc.handle_invite(invite("early"))
    with pytest.raises(AwcpError) as info:
        svc.handle_ack("early")
    assert info.value.code is ErrorCode.INVALID_STATE


def test_exactly_one_recommended_snapshot(service, registry, tmp_path):
    def slow(ctx):
        for i in range(6):
            write_tree(ctx.work_dir, {f"out{i}.txt": b"x"})
            time.sleep(0.05)
        return BackendOutcome(True, "wrote")

    svc = service(CallableBackend(slow), snapshot_interval=0.04).start()
    src = write_tree(str(tmp_path / "src"), FILES)
    svc.handle_invite(invite("snaps"))
    svc.handle_start(start_msg("snaps", src, registry)[0])
    assert wait_until(lambda: svc.records["snaps"].state is AssignmentState.COMPLETED)
    snaps = [e.data for e in svc.logs["snaps"].events if e.event_name == "snapshot"]
    assert len(snaps) >= 2
    assert [s.get("recommended", False) for s in snaps].count(True) == 1
    assert snaps[-1]["recommended"] is True
    assert events_of(svc, "snaps")[-1] == "done"


def test_release_after_ack_timeout(service, registry, tmp_path):
    svc = service(ack_timeout=0.2).start()
    src = write_tree(str(tmp_path / "src"), FILES)
    svc.handle_invite(invite("noack"))
    work = svc.records["noack"].work_dir
    svc.handle_start(start_msg("noack", src, registry)[0])
    assert wait_until(lambda: svc.records["noack"].state is AssignmentState.COMPLETED)
    assert os.path.exists(work)
    assert wait_until(lambda: svc.records["noack"].released, 3.0)
    assert not os.path.exists(work)


def test_ack_releases_immediately(service, registry, tmp_path):
    svc = service(ack_timeout=60).start()
    src = write_tree(str(tmp_path / "src"), FILES)
    svc.handle_invite(invite("acked"))
    svc.handle_start(start_msg("acked", src, registry)[0])
    assert wait_until(lambda: svc.records["acked"].state is AssignmentState.COMPLETED)
    svc.handle_ack("acked")
    svc.handle_ack("acked")
    assert wait_until(lambda: svc.records["acked"].released, 2.0)


def test_pending_without_start_expires(service):
    svc = service(pending_timeout=0.2).start()
    svc.handle_invite(invite("lonely"))
    work = svc.records["lonely"].work_dir
    assert wait_until(lambda: svc.records["lonely"].released, 3.0)
    assert svc.records["lonely"].state is AssignmentState.ERROR
    assert svc.records["lonely"].error["code"] == "LEASE_EXPIRED"
    assert not os.path.exists(work)


def test_cancel_from_delegator_kills_backend(service, registry, tmp_path):
    svc = service(CommandBackend(["sleep", "30"])).start()
    src = write_tree(str(tmp_path / "src"), FILES)
    svc.handle_invite(invite("kill"))
    svc.handle_start(start_msg("kill", src, registry)[0])
    assert wait_until(lambda: svc.records["kill"].ctx.pid is not None)
    pid = svc.records["kill"].ctx.pid
    svc.handle_error(Message.error("kill", ErrorCode.CANCELLED, "stop"))
    assert svc.records["kill"].state is AssignmentState.ERROR
    assert wait_until(lambda: svc.records["kill"].released, 5.0)
    assert not _alive(pid)


def _alive(pid: int) -> bool:
    try:
        with open(f"/proc/{pid}/stat") as f:
            return f.read().split(")")[-1].split()[0] != "Z"
    except FileNotFoundError:
        return False


def test_shutdown_fails_live_assignments(tmp_path, registry):
    svc = ExecutorService(
        ExecutorPolicy(str(tmp_path / "ex"), snapshot_interval=None, tick=0.02),
        CallableBackend(lambda ctx: ctx.cancelled.wait(10) and None),
        registry,
    ).start()
    src = write_tree(str(tmp_path / "src"), FILES)
    svc.handle_invite(invite("live"))
    svc.handle_start(start_msg("live", src, registry)[0])
    svc.close(drain=2.0)
    rec = svc.records["live"]
    assert rec.error["code"] == "SHUTDOWN" and rec.released
    assert not os.path.exists(rec.work_dir)


# --------------------------------------------------------------------------- end to end


def test_command_backend_sees_environment(make_rig):
    rig = make_rig(CommandBackend(["sh", "-c", "env | grep ^AWCP_ | sort > seen.env; echo AWCP_SUMMARY: noted"]))
    root = rig.workspace(FILES)
    rec = rig.delegate(root, task="inspect")
    assert rec.state.value == "completed"
    assert rec.final_summary.final_summary == "noted"
    seen = dict(line.split("=", 1) for line in open(os.path.join(root, "seen.env")).read().splitlines())
    assert seen["AWCP_TASK_DESCRIPTION"] == "inspect"
    assert seen["AWCP_LEASE_MODE"] == "read-write"
    assert seen["AWCP_WORKDIR"].endswith(rec.delegation_id)
    assert seen["AWCP_DEADLINE"].endswith("Z")


def test_backend_failure_reaches_delegator(make_rig):
    rig = make_rig(CommandBackend(["sh", "-c", "echo boom >&2; exit 3"]))
    root = rig.workspace(FILES)
    before = build_manifest(root)
    rec = rig.delegate(root)
    assert rec.state.value == "error"
    assert rec.error["code"] == "BACKEND_FAILED" and "boom" in rec.error["message"]
    assert build_manifest(root) == before
    rig.wait_released(rec.delegation_id)


def test_read_only_write_is_lease_violation(make_rig):
    def rogue(ctx):
        # root ignores file modes, so the executor has to notice on its own
        write_tree(ctx.work_dir, {"a.txt": b"tampered"})

    rig = make_rig(CallableBackend(rogue))
    root = rig.workspace(FILES)
    before = build_manifest(root)
    rec = rig.delegate(root, mode=READ_ONLY)
    assert rec.state.value == "error" and rec.error["code"] == "LEASE_VIOLATION"
    assert build_manifest(root) == before


def test_loopback_completes_without_snapshots(make_rig):
    rig = make_rig(ok_backend(lambda ctx: write_tree(ctx.work_dir, {"live.txt": b"now"})))
    root = rig.workspace(FILES)
    rec = rig.delegate(root, transport=LOOPBACK)
    assert rec.state.value == "completed"
    assert "snapshot" not in events_of(rig.executor, rec.delegation_id)
    assert rec.snapshot_events == 0
    assert open(os.path.join(root, "live.txt")).read() == "now"
    rig.wait_released(rec.delegation_id)
    assert os.path.isdir(root)
