from __future__ import annotations

import json
import os
import threading
from datetime import timedelta

import pytest

from awcp.backends import CallableBackend
from awcp.delegator import (
    AUTO,
    DISCARD,
    STAGED,
    AdmissionDenied,
    AdmissionPolicy,
    DelegationRecord,
    DelegatorService,
)
from awcp.lifecycle import AssignmentState, DelegationEvent, DelegationState
from awcp.protocol import (
    READ_ONLY,
    AwcpError,
    EnvironmentDeclaration,
    ErrorCode,
    InvalidTransition,
    LeaseConfig,
    Message,
    TaskSpec,
    utc_now,
)
from awcp.transport.git import remote_branches
from awcp.transport.handles import GIT
from awcp.transport.workspace import build_manifest

from conftest import ok_backend, write_tree

FILES = {"a.txt": b"alpha\n", "docs/readme.md": b"# hi\n"}


def edit(ctx):
    write_tree(ctx.work_dir, {"a.txt": b"ALPHA\n", "new.txt": b"new\n"})
    os.unlink(os.path.join(ctx.work_dir, "docs/readme.md"))


def blocking_backend():
    return CallableBackend(lambda ctx: ctx.cancelled.wait(30) and None)


def test_admission_outside_root(make_rig, tmp_path):
    rig = make_rig()
    outside = write_tree(str(tmp_path / "elsewhere"), FILES)
    with pytest.raises(AdmissionDenied) as info:
        rig.delegate(outside)
    rec = info.value.record
    assert info.value.code is ErrorCode.ADMISSION_DENIED
    assert [h["event"] for h in rec.history] == ["ERROR"]
    assert rig.delegator.get(rec.delegation_id).state is DelegationState.ERROR
    assert rig.executor.records == {}


def test_admission_deny_patterns_and_limits(tmp_path):
    root = write_tree(str(tmp_path / "w"), {"ok.txt": b"1", ".env": b"SECRET=1"})
    with pytest.raises(AdmissionDenied, match="deny pattern"):
        AdmissionPolicy([str(tmp_path)]).check(root, EnvironmentDeclaration())
    assert AdmissionPolicy([str(tmp_path)]).check(root, EnvironmentDeclaration(("ok.txt",))) == ["ok.txt"]
    with pytest.raises(AdmissionDenied):
        AdmissionPolicy([str(tmp_path)], max_total_bytes=0).check(root, EnvironmentDeclaration(("ok.txt",)))
    with pytest.raises(AdmissionDenied):
        AdmissionPolicy([str(tmp_path)], max_file_count=0).check(root, EnvironmentDeclaration(("ok.txt",)))
    with pytest.raises(ValueError):
        AdmissionPolicy([])


def test_admission_symlink_escape(tmp_path):
    root = write_tree(str(tmp_path / "w"), {"ok.txt": b"1"})
    os.symlink("/etc/hostname", os.path.join(root, "leak"))
    with pytest.raises(AdmissionDenied, match="symlink"):
        AdmissionPolicy([str(tmp_path)]).check(root, EnvironmentDeclaration())


def test_empty_match_set_admitted(make_rig):
    rig = make_rig()
    root = rig.workspace(FILES)
    rig.delegator.admission.max_file_count = 10
    rec = rig.delegate(root, env=EnvironmentDeclaration(("nothing/**",)))
    assert rec.state is DelegationState.COMPLETED
    assert rec.projected_paths == []


def test_accept_narrows_lease(make_rig):
    rig = make_rig(max_ttl_seconds=30)
    root = rig.workspace(FILES)
    rec = rig.delegator.create_and_invite(TaskSpec("t"), LeaseConfig(3600), EnvironmentDeclaration(), root, "archive", rig.url)
    assert rec.state is DelegationState.ACCEPTED
    assert rec.effective_lease.ttl_seconds == 30
    assert rec.executor_work_dir == rig.executor.records[rec.delegation_id].work_dir


def test_unreachable_endpoint(make_rig):
    rig = make_rig()
    root = rig.workspace(FILES)
    rec = rig.delegator.create_and_invite(TaskSpec("t"), LeaseConfig(60), EnvironmentDeclaration(), root, "archive", "http://127.0.0.1:9")
    assert rec.state is DelegationState.ERROR
    assert rec.error["code"] == "CONNECTION_LOST"


def test_decline_recorded(make_rig):
    rig = make_rig(accepted_transport_kinds=("git",))
    rec = rig.delegate(rig.workspace(FILES))
    assert rec.state is DelegationState.ERROR and rec.error["code"] == "DECLINED"


def test_start_requires_accepted(make_rig):
    rig = make_rig()
    root = rig.workspace(FILES)
    rec = DelegationRecord("inv1", TaskSpec("t"), LeaseConfig(60), EnvironmentDeclaration(), root, "archive", rig.url)
    rec.transition(DelegationEvent.SEND_INVITE, utc_now())
    rig.delegator.store.save(rec)
    with pytest.raises(InvalidTransition):
        rig.delegator.start_delegation("inv1")
    assert rig.delegator.get("inv1").state is DelegationState.INVITED


def test_start_rejection_leaves_no_temp_files(make_rig, git_remote):
    rig = make_rig()
    root = rig.workspace(FILES)
    rec = rig.delegator.create_and_invite(TaskSpec("t"), LeaseConfig(60), EnvironmentDeclaration(), root, GIT, rig.url)
    did = rec.delegation_id
    # the executor gives up on the assignment before START arrives
    rig.executor.handle_error(Message.error(did, ErrorCode.CANCELLED, "gone"))
    rec = rig.delegator.start_delegation(did)
    assert rec.state is DelegationState.ERROR
    assert rec.error["code"] == "INVALID_STATE"
    assert rec.released
    tmp = os.path.join(rig.base, "tmp")
    assert not os.path.isdir(tmp) or os.listdir(tmp) == []
    assert remote_branches(git_remote, f"refs/heads/awcp/{did}") == []


def test_happy_path_history(make_rig):
    rig = make_rig(ok_backend(edit))
    root = rig.workspace(FILES)
    rec = rig.delegate(root)
    assert rec.state is DelegationState.COMPLETED
    events = [h["event"] for h in rec.history]
    assert events == ["SEND_INVITE", "RECV_ACCEPT", "SEND_START", "SETUP_COMPLETE", "SNAPSHOT_RECEIVED", "RECV_DONE"]
    rec.check_replay()
    assert open(os.path.join(root, "a.txt"), "rb").read() == b"ALPHA\n"
    assert not os.path.exists(os.path.join(root, "docs/readme.md"))
    assert rec.applied_changes[0]["added"] == ["new.txt"]
    assert rec.released
    rig.wait_released(rec.delegation_id)


def test_staged_approve(make_rig):
    rig = make_rig(ok_backend(edit))
    root = rig.workspace(FILES)
    before = build_manifest(root)
    rec = rig.delegate(root, policy=STAGED)
    assert rec.state is DelegationState.COMPLETED
    assert build_manifest(root) == before
    [snap] = rec.pending_snapshots
    summary = rig.delegator.approve_snapshot(rec.delegation_id, snap.snapshot_id)
    assert summary.modified == ["a.txt"] and summary.added == ["new.txt"] and summary.deleted == ["docs/readme.md"]
    after = rig.delegator.get(rec.delegation_id)
    assert after.pending_snapshots == [] and after.applied_snapshot_ids == [snap.snapshot_id]
    assert after.state is DelegationState.COMPLETED


def test_staged_discard(make_rig):
    rig = make_rig(ok_backend(edit))
    root = rig.workspace(FILES)
    before = build_manifest(root)
    rec = rig.delegate(root, policy=STAGED)
    sid = rec.pending_snapshots[0].snapshot_id
    rig.delegator.discard_snapshot(rec.delegation_id, sid)
    after = rig.delegator.get(rec.delegation_id)
    assert after.pending_snapshots == [] and after.discarded_snapshot_ids == [sid]
    assert after.state is DelegationState.COMPLETED
    assert build_manifest(root) == before
    with pytest.raises(AwcpError):
        rig.delegator.approve_snapshot(rec.delegation_id, sid)


def test_discard_policy_and_read_only(make_rig):
    rig = make_rig(ok_backend(edit))
    root = rig.workspace(FILES)
    before = build_manifest(root)
    rec = rig.delegate(root, policy=DISCARD)
    assert rec.state is DelegationState.COMPLETED and len(rec.discarded_snapshot_ids) == 1
    assert build_manifest(root) == before

    rig2 = make_rig()
    root2 = rig2.workspace(FILES, "ro")
    before2 = build_manifest(root2)
    rec = rig2.delegate(root2, mode=READ_ONLY, policy=AUTO)
    assert rec.state is DelegationState.COMPLETED
    assert rec.snapshot_events == 0
    assert build_manifest(root2) == before2


def test_duplicate_done_single_ack(make_rig):
    rig = make_rig()
    acks = []
    real = rig.executor.handle_ack

    def counting(did):
        acks.append(did)
        real(did)

    rig.executor.handle_ack = counting
    rec = rig.delegate(rig.workspace(FILES))
    did = rec.delegation_id
    done = [e for e in rig.executor.logs[did].events if e.event_name == "done"][0]
    # the same frame again, and a fresh one with a higher id
    rig.delegator.handle_executor_event(did, done)
    rig.delegator.handle_executor_event(did, type(done)("done", done.id + 5, done.data))
    after = rig.delegator.get(did)
    assert after.state is DelegationState.COMPLETED
    assert acks == [did]
    assert after.history == rec.history


def test_cancel_reaches_executor(make_rig):
    rig = make_rig(blocking_backend())
    rec = rig.delegate(rig.workspace(FILES), wait=0)
    did = rec.delegation_id
    rig.delegator.wait_for(did, lambda r: r.state is DelegationState.RUNNING, 5)
    rec = rig.delegator.cancel_delegation(did)
    assert rec.state is DelegationState.CANCELLED
    erec = rig.executor.records[did]
    assert erec.state is AssignmentState.ERROR and erec.error["code"] == "CANCELLED"
    rig.wait_released(did)
    assert rig.delegator.cancel_delegation(did).state is DelegationState.CANCELLED


def test_expire_scan(make_rig):
    rig = make_rig(blocking_backend(), scan_interval=60)
    rec = rig.delegate(rig.workspace(FILES), ttl=1, wait=0)
    did = rec.delegation_id
    rig.delegator.wait_for(did, lambda r: r.state is DelegationState.RUNNING, 5)
    assert rig.delegator.expire_scan(utc_now()) == []
    changed = rig.delegator.expire_scan(utc_now() + timedelta(seconds=3))
    assert [r.delegation_id for r in changed] == [did]
    rec = rig.delegator.get(did)
    assert rec.state is DelegationState.EXPIRED and rec.error["code"] == "LEASE_EXPIRED"
    assert rig.executor.records[did].state is AssignmentState.ERROR
    # second scan is a no-op
    assert rig.delegator.expire_scan(utc_now() + timedelta(seconds=10)) == []


def test_invite_deadline_expires_accepted(make_rig):
    rig = make_rig(scan_interval=60)
    rec = rig.delegator.create_and_invite(TaskSpec("t"), LeaseConfig(60), EnvironmentDeclaration(), rig.workspace(FILES), "archive", rig.url)
    changed = rig.delegator.expire_scan(utc_now() + timedelta(seconds=rig.delegator.invite_timeout + 1))
    assert [r.state for r in changed] == [DelegationState.EXPIRED]
    assert rig.executor.records[rec.delegation_id].state is AssignmentState.ERROR


def test_persist_recover_equality(make_rig, tmp_path, blob_store, git_remote):
    rig = make_rig(ok_backend(edit))
    rec = rig.delegate(rig.workspace(FILES), policy=STAGED)
    fresh = DelegatorService(rig.delegator.store.state_dir, rig.delegator.admission, rig.registry)
    loaded = fresh.get(rec.delegation_id)
    assert loaded.to_dict() == rec.to_dict()
    assert DelegationRecord.from_dict(json.loads(json.dumps(rec.to_dict()))).to_dict() == rec.to_dict()


def test_recover_with_one_corrupted_file(make_rig):
    rig = make_rig()
    ids = [rig.delegate(rig.workspace(FILES, f"w{i}")).delegation_id for i in range(3)]
    with open(rig.delegator.store.path(ids[1]), "w") as f:
        f.write("{ this is not json")
    fresh = DelegatorService(rig.delegator.store.state_dir, rig.delegator.admission, rig.registry)
    out = {r.delegation_id: r for r in fresh.recover_all()}
    assert set(out) == set(ids)
    assert out[ids[0]].state is DelegationState.COMPLETED and out[ids[2]].state is DelegationState.COMPLETED
    assert out[ids[1]].state is DelegationState.ERROR
    assert [r.delegation_id for r in fresh.recovery_failures] == [ids[1]]
    fresh.close()


def test_crash_and_recover_resumes_stream(make_rig):
    gate = threading.Event()

    def gated(ctx):
        gate.wait(10)
        edit(ctx)

    rig = make_rig(ok_backend(gated))
    root = rig.workspace(FILES)
    rec = rig.delegate(root, wait=0)
    did = rec.delegation_id
    rig.delegator.wait_for(did, lambda r: r.state is DelegationState.RUNNING, 5)
    rig.delegator.crash()
    gate.set()
    assert rig.executor.records[did].ctx and rig.delegator.get(did).state is DelegationState.RUNNING
    fresh = DelegatorService(rig.delegator.store.state_dir, rig.delegator.admission, rig.registry)
    fresh.recover_all()
    rec = fresh.wait_terminal(did, 10)
    assert rec.state is DelegationState.COMPLETED
    assert len(rec.applied_snapshot_ids) == 1
    assert open(os.path.join(root, "a.txt"), "rb").read() == b"ALPHA\n"
    fresh.close()
