"""Delegator side: admission, invitation, packaging, event consumption, reconciliation, recovery."""

from __future__ import annotations

import contextlib
import fnmatch
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Callable, Iterator

import httpx
from filelock import FileLock

from .lifecycle import (
    EXPIRE_SOURCES,
    DelegationEvent,
    DelegationState,
    delegation_transition,
    fold_delegation,
)
from .protocol import (
    READ_WRITE,
    ActiveLease,
    AwcpError,
    DonePayload,
    EnvironmentDeclaration,
    ErrorCode,
    InvalidTransition,
    InvitePayload,
    LeaseConfig,
    Message,
    MessageType,
    RemoteError,
    StartPayload,
    TaskSpec,
    activate_lease,
    format_timestamp,
    negotiate_lease,
    new_delegation_id,
    parse_timestamp,
    utc_now,
)
from .transport import TransportRegistry, apply_snapshot, default_registry
from .transport.base import DelegatorSession
from .transport.handles import SnapshotDescriptor
from .transport.workspace import ChangeSummary, resolve_environment
from .wire.client import EventSubscription, ExecutorClient
from .wire.sse import SseEvent

logger = logging.getLogger(__name__)

AUTO = "auto"
STAGED = "staged"
DISCARD = "discard"
SNAPSHOT_POLICIES = (AUTO, STAGED, DISCARD)

DEFAULT_DENY = (
    ".env",
    ".env.*",
    "*.pem",
    "*.key",
    "id_rsa*",
    "id_ed25519*",
    "id_ecdsa*",
    ".ssh/*",
    "*/.ssh/*",
    ".netrc",
    ".git-credentials",
    ".aws/credentials",
    "*/.aws/credentials",
)


class AdmissionDenied(AwcpError):
    default_code = ErrorCode.ADMISSION_DENIED

    def __init__(self, message: str, hint: str | None = None, record: "DelegationRecord | None" = None):
        super().__init__(message, ErrorCode.ADMISSION_DENIED, hint)
        self.record = record


@dataclass
class AdmissionPolicy:
    allowed_roots: list[str]
    max_total_bytes: int = 512 * 1024 * 1024
    max_file_count: int = 20000
    deny_patterns: list[str] = field(default_factory=lambda: list(DEFAULT_DENY))
    follow_symlinks_outside_root: bool = False

    def __post_init__(self):
        if not self.allowed_roots:
            raise ValueError("allowedRoots must be non-empty")
        self.allowed_roots = [os.path.realpath(r) for r in self.allowed_roots]

    def denied(self, rel: str) -> str | None:
        base = os.path.basename(rel)
        for pat in self.deny_patterns:
            if fnmatch.fnmatchcase(rel, pat) or fnmatch.fnmatchcase(base, pat):
                return pat
        return None

    def check(self, root: str, env: EnvironmentDeclaration) -> list[str]:
        """Resolve the projected file set, raising AdmissionDenied on any policy breach."""
        if not os.path.isdir(root):
            raise AdmissionDenied(f"workspace {root} is not a directory")
        real = os.path.realpath(root)
        if not any(os.path.commonpath([real, allowed]) == allowed for allowed in self.allowed_roots):
            raise AdmissionDenied(f"workspace {real} is outside the allowed roots", hint="add it to allowedRoots")
        try:
            paths = resolve_environment(real, env)
        except AwcpError as exc:
            raise AdmissionDenied(exc.message) from None
        if len(paths) > self.max_file_count:
            raise AdmissionDenied(f"{len(paths)} files exceed the limit of {self.max_file_count}")
        total = 0
        for rel in paths:
            pat = self.denied(rel)
            if pat:
                raise AdmissionDenied(f"{rel} matches deny pattern {pat!r}", hint="exclude it from the environment")
            full = os.path.join(real, rel)
            if os.path.islink(full):
                target = os.path.realpath(full)
                if os.path.commonpath([target, real]) != real and not self.follow_symlinks_outside_root:
                    raise AdmissionDenied(f"symlink {rel} points outside the workspace")
                continue
            total += os.path.getsize(full)
        if total > self.max_total_bytes:
            raise AdmissionDenied(f"{total} bytes exceed the limit of {self.max_total_bytes}")
        return paths


@dataclass
class DelegationRecord:
    delegation_id: str
    task: TaskSpec
    proposed_lease: LeaseConfig
    env: EnvironmentDeclaration
    workspace_root: str
    transport_kind: str
    executor_endpoint: str
    snapshot_policy: str = AUTO
    state: DelegationState = DelegationState.CREATED
    effective_lease: LeaseConfig | None = None
    active_lease: ActiveLease | None = None
    executor_work_dir: str | None = None
    pending_snapshots: list[SnapshotDescriptor] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    final_summary: DonePayload | None = None
    error: dict | None = None
    invite_deadline: datetime | None = None
    last_event_id: int = 0
    applied_snapshot_ids: list[str] = field(default_factory=list)
    discarded_snapshot_ids: list[str] = field(default_factory=list)
    applied_changes: list[dict] = field(default_factory=list)
    snapshot_events: int = 0
    live_sync: bool = False
    transport_state: dict | None = None
    projected_paths: list[str] = field(default_factory=list)
    ack_due: bool = False
    ack_sent: bool = False

    @property
    def effective_policy(self) -> str:
        return AUTO if self.live_sync else self.snapshot_policy

    @property
    def released(self) -> bool:
        return self.transport_state is None or bool(self.transport_state.get("released"))

    def transition(self, event: DelegationEvent, now: datetime) -> DelegationState:
        nxt = delegation_transition(self.state, event)
        self.history.append({"at": format_timestamp(now), "from": self.state.value, "event": event.value, "state": nxt.value})
        self.state = nxt
        return nxt

    def check_replay(self) -> None:
        folded = fold_delegation(h["event"] for h in self.history)
        if folded is not self.state:
            raise AwcpError(f"history folds to {folded.value} but state is {self.state.value}", ErrorCode.INVALID_STATE)

    def to_dict(self) -> dict:
        return {
            "delegationId": self.delegation_id,
            "state": self.state.value,
            "task": self.task.to_dict(),
            "proposedLease": self.proposed_lease.to_dict(),
            "effectiveLease": self.effective_lease.to_dict() if self.effective_lease else None,
            "activeLease": self.active_lease.to_dict() if self.active_lease else None,
            "env": self.env.to_dict(),
            "workspaceRoot": self.workspace_root,
            "transportKind": self.transport_kind,
            "executorEndpoint": self.executor_endpoint,
            "executorWorkDir": self.executor_work_dir,
            "snapshotPolicy": self.snapshot_policy,
            "pendingSnapshots": [s.to_dict() for s in self.pending_snapshots],
            "history": list(self.history),
            "finalSummary": self.final_summary.to_dict() if self.final_summary else None,
            "error": self.error,
            "inviteDeadline": format_timestamp(self.invite_deadline) if self.invite_deadline else None,
            "lastEventId": self.last_event_id,
            "appliedSnapshotIds": list(self.applied_snapshot_ids),
            "discardedSnapshotIds": list(self.discarded_snapshot_ids),
            "appliedChanges": list(self.applied_changes),
            "snapshotEvents": self.snapshot_events,
            "liveSync": self.live_sync,
            "transportState": self.transport_state,
            "projectedPaths": list(self.projected_paths),
            "ackDue": self.ack_due,
            "ackSent": self.ack_sent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DelegationRecord":
        def opt(key, fn):
            v = d.get(key)
            return fn(v) if v is not None else None

        return cls(
            delegation_id=d["delegationId"],
            task=TaskSpec.from_dict(d["task"]),
            proposed_lease=LeaseConfig.from_dict(d["proposedLease"]),
            env=EnvironmentDeclaration.from_dict(d["env"]),
            workspace_root=d["workspaceRoot"],
            transport_kind=d["transportKind"],
            executor_endpoint=d["executorEndpoint"],
            snapshot_policy=d["snapshotPolicy"],
            state=DelegationState(d["state"]),
            effective_lease=opt("effectiveLease", LeaseConfig.from_dict),
            active_lease=opt("activeLease", ActiveLease.from_dict),
            executor_work_dir=d.get("executorWorkDir"),
            pending_snapshots=[SnapshotDescriptor.from_dict(s) for s in d.get("pendingSnapshots", [])],
            history=list(d.get("history", [])),
            final_summary=opt("finalSummary", DonePayload.from_dict),
            error=d.get("error"),
            invite_deadline=opt("inviteDeadline", parse_timestamp),
            last_event_id=int(d.get("lastEventId", 0)),
            applied_snapshot_ids=list(d.get("appliedSnapshotIds", [])),
            discarded_snapshot_ids=list(d.get("discardedSnapshotIds", [])),
            applied_changes=list(d.get("appliedChanges", [])),
            snapshot_events=int(d.get("snapshotEvents", 0)),
            live_sync=bool(d.get("liveSync", False)),
            transport_state=d.get("transportState"),
            projected_paths=list(d.get("projectedPaths", [])),
            ack_due=bool(d.get("ackDue", False)),
            ack_sent=bool(d.get("ackSent", False)),
        )

    @classmethod
    def unreadable(cls, delegation_id: str, reason: str, now: datetime) -> "DelegationRecord":
        """Placeholder for a state file that could not be parsed."""
        rec = cls(delegation_id, TaskSpec("unrecoverable record"), LeaseConfig(1), EnvironmentDeclaration(), "", "", "")
        rec.transition(DelegationEvent.ERROR, now)
        rec.error = {"code": ErrorCode.INVALID_STATE.value, "message": reason}
        return rec


class RecordStore:
    """One JSON document per delegation under ``<stateDir>/delegations``."""

    def __init__(self, state_dir: str):
        self.state_dir = state_dir
        self.dir = os.path.join(state_dir, "delegations")
        os.makedirs(self.dir, exist_ok=True)
        self._locks: dict[str, FileLock] = {}
        self._guard = threading.Lock()

    def path(self, delegation_id: str) -> str:
        return os.path.join(self.dir, f"{delegation_id}.json")

    def file_lock(self, delegation_id: str) -> FileLock:
        with self._guard:
            lock = self._locks.get(delegation_id)
            if lock is None:
                lock = self._locks[delegation_id] = FileLock(os.path.join(self.dir, f".{delegation_id}.lock"), thread_local=False)
            return lock

    def save(self, rec: DelegationRecord) -> None:
        rec.check_replay()
        fd, tmp = tempfile.mkstemp(dir=self.dir, prefix=f".{rec.delegation_id}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(rec.to_dict(), f, indent=1, sort_keys=True)
            os.replace(tmp, self.path(rec.delegation_id))
        except BaseException:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(tmp)
            raise

    def load(self, delegation_id: str) -> DelegationRecord:
        try:
            with open(self.path(delegation_id), encoding="utf-8") as f:
                rec = DelegationRecord.from_dict(json.load(f))
        except FileNotFoundError:
            raise AwcpError(f"unknown delegation {delegation_id}", ErrorCode.UNKNOWN_DELEGATION) from None
        except (ValueError, KeyError, TypeError, AwcpError) as exc:
            raise AwcpError(f"state file for {delegation_id} is corrupt: {exc}", ErrorCode.INVALID_STATE) from None
        rec.check_replay()
        return rec

    def exists(self, delegation_id: str) -> bool:
        return os.path.exists(self.path(delegation_id))

    def ids(self) -> list[str]:
        return sorted(n[:-5] for n in os.listdir(self.dir) if n.endswith(".json") and not n.startswith("."))


class DelegatorService:
    """Drives delegations. Mutations of one delegation are serialized by a thread
    lock plus a file lock, and every mutation reloads and re-persists the record."""

    def __init__(
        self,
        state_dir: str,
        admission: AdmissionPolicy,
        registry: TransportRegistry | None = None,
        http_transport: httpx.BaseTransport | None = None,
        token: str | None = None,
        clock: Callable[[], datetime] = utc_now,
        invite_timeout: float = 120.0,
        scan_interval: float = 1.0,
        stream_retries: int = 5,
        on_event: Callable[[DelegationRecord, SseEvent], None] | None = None,
    ):
        self.store = RecordStore(state_dir)
        self.admission = admission
        self.registry = registry or default_registry()
        self.http_transport = http_transport
        self.token = token
        self.clock = clock
        self.invite_timeout = invite_timeout
        self.scan_interval = scan_interval
        self.stream_retries = stream_retries
        self.on_event = on_event
        self.records: dict[str, DelegationRecord] = {}
        self.recovery_failures: list[DelegationRecord] = []
        self._locks: dict[str, threading.RLock] = {}
        self._locks_guard = threading.Lock()
        self._sessions: dict[str, DelegatorSession] = {}
        self._clients: dict[str, ExecutorClient] = {}
        self._watchers: dict[str, tuple[threading.Thread, EventSubscription]] = {}
        self._changed = threading.Condition()
        self._dead = threading.Event()
        self._scanner: threading.Thread | None = None

    # ------------------------------------------------------------------ plumbing

    def _lock(self, delegation_id: str) -> threading.RLock:
        with self._locks_guard:
            lock = self._locks.get(delegation_id)
            if lock is None:
                lock = self._locks[delegation_id] = threading.RLock()
            return lock

    @contextlib.contextmanager
    def _mutate(self, delegation_id: str) -> Iterator[DelegationRecord]:
        with self._lock(delegation_id), self.store.file_lock(delegation_id):
            if self._dead.is_set():
                raise AwcpError("delegator service is stopped", ErrorCode.SHUTDOWN)
            rec = self.store.load(delegation_id)
            try:
                yield rec
            finally:
                self.store.save(rec)
                self.records[delegation_id] = rec
                with self._changed:
                    self._changed.notify_all()

    def get(self, delegation_id: str) -> DelegationRecord:
        rec = self.store.load(delegation_id)
        self.records[delegation_id] = rec
        return rec

    def list_records(self) -> list[DelegationRecord]:
        out = []
        for did in self.store.ids():
            with contextlib.suppress(AwcpError):
                out.append(self.store.load(did))
        return out

    def client(self, endpoint: str) -> ExecutorClient:
        c = self._clients.get(endpoint)
        if c is None:
            c = self._clients[endpoint] = ExecutorClient(endpoint, self.token, self.http_transport)
        return c

    def _session(self, rec: DelegationRecord) -> DelegatorSession | None:
        session = self._sessions.get(rec.delegation_id)
        if session is None and rec.transport_state is not None:
            session = self.registry.delegator(rec.transport_kind).restore(rec.transport_state)
            self._sessions[rec.delegation_id] = session
        return session

    def wait_for(self, delegation_id: str, predicate: Callable[[DelegationRecord], bool], timeout: float) -> DelegationRecord:
        """Block until ``predicate(record)`` holds or the timeout passes; returns the latest record."""
        deadline = time.monotonic() + timeout
        with self._changed:
            while True:
                # reread from disk: another process may have moved the record
                rec = self.get(delegation_id)
                remaining = deadline - time.monotonic()
                if predicate(rec) or remaining <= 0:
                    return rec
                self._changed.wait(min(remaining, 0.25))

    def wait_terminal(self, delegation_id: str, timeout: float = 60.0) -> DelegationRecord:
        return self.wait_for(delegation_id, lambda r: r.state.terminal, timeout)

    # ------------------------------------------------------------------ create / invite

    def create_and_invite(
        self,
        task: TaskSpec,
        lease: LeaseConfig,
        env: EnvironmentDeclaration,
        workspace_root: str,
        transport_kind: str,
        executor_endpoint: str,
        snapshot_policy: str = AUTO,
        delegation_id: str | None = None,
    ) -> DelegationRecord:
        if snapshot_policy not in SNAPSHOT_POLICIES:
            raise ValueError(f"unknown snapshot policy {snapshot_policy!r}")
        did = delegation_id or new_delegation_id()
        if self.store.exists(did):
            raise AwcpError(f"delegation {did} already exists", ErrorCode.DUPLICATE)
        rec = DelegationRecord(
            did, task, lease, env, os.path.realpath(workspace_root), transport_kind, executor_endpoint, snapshot_policy
        )
        try:
            self.registry.delegator(transport_kind)
            rec.projected_paths = self.admission.check(workspace_root, env)
        except AwcpError as exc:
            rec.transition(DelegationEvent.ERROR, self.clock())
            rec.error = {"code": ErrorCode.ADMISSION_DENIED.value, "message": exc.message}
            self.store.save(rec)
            self.records[did] = rec
            raise AdmissionDenied(exc.message, exc.hint, rec) from None
        self.store.save(rec)

        with self._mutate(did) as rec:
            now = self.clock()
            rec.transition(DelegationEvent.SEND_INVITE, now)
            rec.invite_deadline = now + timedelta(seconds=self.invite_timeout)
        msg = Message.build(MessageType.INVITE, did, InvitePayload(task, lease, env, transport_kind))
        try:
            accept = self.client(executor_endpoint).invite(msg)
        except AwcpError as exc:
            with self._mutate(did) as rec:
                self._fail(rec, exc.code, exc.message, exc.hint, notify=False)
            return rec
        with self._mutate(did) as rec:
            if rec.state is not DelegationState.INVITED:
                logger.info("%s: ACCEPT arrived in state %s; ignored", did, rec.state.value)
                return rec
            rec.effective_lease = negotiate_lease(rec.proposed_lease, accept.payload.constraints)
            rec.executor_work_dir = accept.payload.work_dir
            rec.transition(DelegationEvent.RECV_ACCEPT, self.clock())
        logger.info("%s accepted: %s %ss", did, rec.effective_lease.mode, rec.effective_lease.ttl_seconds)
        return rec

    # ------------------------------------------------------------------ start

    def start_delegation(self, delegation_id: str) -> DelegationRecord:
        with self._mutate(delegation_id) as rec:
            if rec.state is not DelegationState.ACCEPTED:
                raise InvalidTransition(f"cannot start a delegation in state {rec.state.value}")
            try:
                session = self.registry.delegator(rec.transport_kind).package(
                    rec.workspace_root, rec.projected_paths, delegation_id, rec.effective_lease.ttl_seconds
                )
            except AwcpError as exc:
                self._fail(rec, exc.code, f"packaging failed: {exc.message}", exc.hint)
                return rec
            except Exception as exc:
                logger.exception("%s: packaging failed", delegation_id)
                self._fail(rec, ErrorCode.TRANSPORT_FAILED, f"packaging failed: {exc}")
                return rec
            self._sessions[delegation_id] = session
            rec.transport_state = session.state()
            rec.live_sync = session.capabilities.live_sync
            rec.active_lease = activate_lease(rec.effective_lease, self.clock())
            handle = session.handle
            endpoint = rec.executor_endpoint
            lease = rec.active_lease
        msg = Message.build(MessageType.START, delegation_id, StartPayload(lease, handle))
        try:
            self.client(endpoint).start(msg)
        except AwcpError as exc:
            # a remote rejection already cleaned the executor; a lost request may not have
            with self._mutate(delegation_id) as rec:
                self._fail(rec, exc.code, exc.message, exc.hint, notify=not isinstance(exc, RemoteError))
            return rec
        with self._mutate(delegation_id) as rec:
            if rec.state is DelegationState.ACCEPTED:
                rec.transition(DelegationEvent.SEND_START, self.clock())
            state = rec.state
        if state in (DelegationState.STARTED, DelegationState.RUNNING):
            self._watch(delegation_id)
        return rec

    def delegate(self, *args, **kw) -> DelegationRecord:
        """create_and_invite followed by start_delegation when accepted."""
        rec = self.create_and_invite(*args, **kw)
        if rec.state is DelegationState.ACCEPTED:
            rec = self.start_delegation(rec.delegation_id)
        return rec

    # ------------------------------------------------------------------ events

    def _watch(self, delegation_id: str) -> None:
        if self._dead.is_set() or delegation_id in self._watchers:
            return
        rec = self.records.get(delegation_id) or self.get(delegation_id)
        sub = self.client(rec.executor_endpoint).subscribe(delegation_id, rec.last_event_id, max_retries=self.stream_retries)
        t = threading.Thread(target=self._consume, args=(delegation_id, sub), daemon=True, name=f"awcp-watch-{delegation_id}")
        self._watchers[delegation_id] = (t, sub)
        t.start()

    def _consume(self, delegation_id: str, sub: EventSubscription) -> None:
        try:
            for ev in sub:
                if self._dead.is_set():
                    return
                rec = self.handle_executor_event(delegation_id, ev)
                if rec.state.terminal and ev.terminal:
                    break
        except AwcpError as exc:
            if self._dead.is_set() or sub.closed:
                return
            logger.warning("%s: event stream failed: %s", delegation_id, exc)
            with contextlib.suppress(AwcpError), self._mutate(delegation_id) as rec:
                if not rec.state.terminal:
                    self._fail(rec, ErrorCode.CONNECTION_LOST, f"event stream lost: {exc.message}")
        except Exception:
            if not self._dead.is_set():
                logger.exception("%s: event consumer crashed", delegation_id)
        finally:
            self._watchers.pop(delegation_id, None)

    def handle_executor_event(self, delegation_id: str, ev: SseEvent) -> DelegationRecord:
        with self._mutate(delegation_id) as rec:
            if ev.id and ev.id <= rec.last_event_id:
                logger.debug("%s: duplicate event %s dropped", delegation_id, ev.id)
                return rec
            rec.last_event_id = max(rec.last_event_id, ev.id)
            if self.on_event is not None:
                self.on_event(rec, ev)
            if rec.state.terminal:
                logger.info("%s: %s event after %s ignored", delegation_id, ev.event_name, rec.state.value)
                return rec
            now = self.clock()
            if ev.event_name == "status":
                if rec.state is DelegationState.STARTED:
                    rec.transition(DelegationEvent.SETUP_COMPLETE, now)
            elif ev.event_name == "snapshot":
                rec.snapshot_events += 1
                self._setup_if_started(rec, now)
                rec.transition(DelegationEvent.SNAPSHOT_RECEIVED, now)
                self._on_snapshot(rec, ev.data)
            elif ev.event_name == "done":
                self._setup_if_started(rec, now)
                rec.final_summary = DonePayload.from_dict(ev.data)
                rec.transition(DelegationEvent.RECV_DONE, now)
                rec.ack_due = True
                self._finish(rec)
            elif ev.event_name == "error":
                code = ev.data.get("code", ErrorCode.CONNECTION_LOST.value)
                rec.error = {k: ev.data[k] for k in ("code", "message", "hint") if k in ev.data}
                if code == ErrorCode.LEASE_EXPIRED.value and rec.state in EXPIRE_SOURCES:
                    rec.transition(DelegationEvent.EXPIRE, now)
                else:
                    rec.transition(DelegationEvent.ERROR, now)
                rec.ack_due = True
                self._finish(rec)
            return rec

    def _setup_if_started(self, rec: DelegationRecord, now: datetime) -> None:
        # the status event may have been evicted from the replay buffer
        if rec.state is DelegationState.STARTED:
            rec.transition(DelegationEvent.SETUP_COMPLETE, now)

    def _finish(self, rec: DelegationRecord) -> None:
        if rec.ack_due and not rec.ack_sent:
            rec.ack_sent = True
            try:
                self.client(rec.executor_endpoint).ack(rec.delegation_id)
            except AwcpError as exc:
                # the executor releases on its own ACK timeout
                logger.warning("%s: ACK failed: %s", rec.delegation_id, exc)
        self._teardown(rec)

    # ------------------------------------------------------------------ snapshots

    def _on_snapshot(self, rec: DelegationRecord, data: dict) -> None:
        snap = SnapshotDescriptor.from_dict(data)
        sid = snap.snapshot_id
        known = set(rec.applied_snapshot_ids) | set(rec.discarded_snapshot_ids) | {s.snapshot_id for s in rec.pending_snapshots}
        if sid in known:
            logger.info("%s: snapshot %s already handled", rec.delegation_id, sid)
            return
        policy = rec.effective_policy
        if policy == DISCARD or rec.effective_lease.mode != READ_WRITE:
            rec.discarded_snapshot_ids.append(sid)
            return
        try:
            session = self._session(rec)
            snap = session.materialize(snap) if session is not None else snap
            if policy == STAGED:
                rec.pending_snapshots.append(snap)
                return
            self._apply(rec, snap)
        except AwcpError as exc:
            logger.warning("%s: snapshot %s rejected: %s", rec.delegation_id, sid, exc)
            self._fail(rec, exc.code, f"snapshot {sid}: {exc.message}")

    def _apply(self, rec: DelegationRecord, snap: SnapshotDescriptor) -> ChangeSummary:
        summary = apply_snapshot(rec.workspace_root, snap, rec.effective_lease.mode, rec.projected_paths)
        rec.applied_snapshot_ids.append(snap.snapshot_id)
        rec.applied_changes.append({"snapshotId": snap.snapshot_id, **summary.to_dict()})
        rec.projected_paths = sorted((set(rec.projected_paths) | set(summary.added)) - set(summary.deleted))
        return summary

    def resolve_snapshot(self, delegation_id: str, snapshot_id: str, decision: str) -> ChangeSummary | None:
        """Approve (apply) or discard a staged snapshot."""
        if decision not in ("approve", "discard"):
            raise ValueError(f"unknown decision {decision!r}")
        with self._mutate(delegation_id) as rec:
            match = [s for s in rec.pending_snapshots if s.snapshot_id == snapshot_id]
            if not match:
                raise AwcpError(f"no pending snapshot {snapshot_id} for {delegation_id}", ErrorCode.UNKNOWN_DELEGATION)
            snap = match[0]
            if decision == "discard":
                rec.pending_snapshots.remove(snap)
                rec.discarded_snapshot_ids.append(snapshot_id)
                return None
            summary = self._apply(rec, snap)
            rec.pending_snapshots.remove(snap)
            return summary

    def approve_snapshot(self, delegation_id: str, snapshot_id: str) -> ChangeSummary:
        return self.resolve_snapshot(delegation_id, snapshot_id, "approve")

    def discard_snapshot(self, delegation_id: str, snapshot_id: str) -> None:
        self.resolve_snapshot(delegation_id, snapshot_id, "discard")

    # ------------------------------------------------------------------ failure paths

    def _fail(self, rec, code, message: str, hint: str | None = None, notify: bool = True, event=DelegationEvent.ERROR) -> None:
        """Apply ERROR/CANCEL/EXPIRE, tell the executor, tear the transport down."""
        code = ErrorCode(code)
        if rec.state.terminal:
            return
        known_to_executor = rec.state not in (DelegationState.CREATED,)
        rec.transition(event, self.clock())
        rec.error = {"code": code.value, "message": message, **({"hint": hint} if hint else {})}
        if notify and known_to_executor:
            self._notify(rec, code, message)
        self._stop_watch(rec.delegation_id)
        self._teardown(rec)

    def _notify(self, rec: DelegationRecord, code: ErrorCode, message: str) -> None:
        try:
            self.client(rec.executor_endpoint).send_error(Message.error(rec.delegation_id, code, message))
        except AwcpError as exc:
            logger.info("%s: could not notify executor: %s", rec.delegation_id, exc)

    def _stop_watch(self, delegation_id: str) -> None:
        entry = self._watchers.get(delegation_id)
        if entry and entry[0] is not threading.current_thread():
            entry[1].close()

    def _teardown(self, rec: DelegationRecord) -> None:
        session = self._session(rec)
        if session is None:
            return
        try:
            session.detach()
            session.release()
        except Exception as exc:
            logger.warning("%s: transport cleanup failed: %s", rec.delegation_id, exc)
        rec.transport_state = session.state()
        if session.released:
            self._sessions.pop(rec.delegation_id, None)

    def cancel_delegation(self, delegation_id: str) -> DelegationRecord:
        with self._mutate(delegation_id) as rec:
            if rec.state.terminal:
                logger.warning("%s: already %s; cancel ignored", delegation_id, rec.state.value)
                return rec
            self._fail(rec, ErrorCode.CANCELLED, "cancelled by the delegator", event=DelegationEvent.CANCEL)
            return rec

    def expire_scan(self, now: datetime | None = None) -> list[DelegationRecord]:
        now = now or self.clock()
        changed = []
        for did in self.store.ids():
            try:
                rec = self.store.load(did)
            except AwcpError:
                continue
            if not self._expiry_due(rec, now):
                continue
            with self._mutate(did) as rec:
                if not self._expiry_due(rec, now):
                    continue
                if rec.state is DelegationState.STARTED:
                    event = DelegationEvent.ERROR
                else:
                    event = DelegationEvent.EXPIRE
                self._fail(rec, ErrorCode.LEASE_EXPIRED, "lease elapsed", event=event)
                changed.append(rec)
        return changed

    @staticmethod
    def _expiry_due(rec: DelegationRecord, now: datetime) -> bool:
        if rec.state.terminal or rec.state is DelegationState.CREATED:
            return False
        if rec.active_lease is not None:
            return rec.active_lease.is_expired(now)
        return rec.invite_deadline is not None and now >= rec.invite_deadline

    def start_scanner(self) -> "DelegatorService":
        if self._scanner is None:
            self._scanner = threading.Thread(target=self._scan_loop, daemon=True, name="awcp-expiry-scan")
            self._scanner.start()
        return self

    def _scan_loop(self) -> None:
        while not self._dead.wait(self.scan_interval):
            try:
                self.expire_scan()
            except AwcpError:
                if self._dead.is_set():
                    return
            except Exception:
                logger.exception("expiry scan failed")

    # ------------------------------------------------------------------ crash / recovery

    def crash(self) -> None:
        """Die abruptly: stop threads, keep every transport attached, persist nothing more."""
        self._dead.set()
        for _, sub in list(self._watchers.values()):
            sub.close()
        for t, _ in list(self._watchers.values()):
            t.join(timeout=2.0)
        self._watchers.clear()
        for c in self._clients.values():
            c.close()
        self._clients.clear()

    def close(self) -> None:
        """Stop consuming events. Live delegations stay resumable through recover_all."""
        self.crash()
        if self._scanner is not None:
            self._scanner.join(timeout=self.scan_interval + 1)

    def recover_all(self) -> list[DelegationRecord]:
        """Reload every record, finish interrupted cleanups and resume event streams."""
        recovered = []
        self.recovery_failures = []
        for did in self.store.ids():
            try:
                rec = self.store.load(did)
            except AwcpError as exc:
                logger.error("%s", exc)
                bad = DelegationRecord.unreadable(did, exc.message, self.clock())
                self.recovery_failures.append(bad)
                recovered.append(bad)
                continue
            self.records[did] = rec
            if rec.state.terminal:
                if (rec.ack_due and not rec.ack_sent) or not rec.released:
                    with self._mutate(did) as rec:
                        self._finish(rec)
            elif rec.state in (DelegationState.STARTED, DelegationState.RUNNING):
                self._watch(did)
            recovered.append(rec)
        return recovered


def summarize(rec: DelegationRecord) -> dict:
    """Compact status view used by the CLI."""
    return {
        "delegationId": rec.delegation_id,
        "state": rec.state.value,
        "transport": rec.transport_kind,
        "policy": rec.snapshot_policy,
        "effectivePolicy": rec.effective_policy,
        "pendingSnapshots": [s.snapshot_id for s in rec.pending_snapshots],
        "error": rec.error,
        "finalSummary": rec.final_summary.to_dict() if rec.final_summary else None,
    }
