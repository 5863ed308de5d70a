"""Executor side: accept invitations, provision work dirs, run backends, stream events."""

from __future__ import annotations

import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Callable

from .backends import Backend, BackendContext, BackendOutcome
from .lifecycle import AssignmentEvent, AssignmentState, assignment_transition
from .protocol import (
    LEASE_MODES,
    READ_ONLY,
    READ_WRITE,
    AcceptPayload,
    AwcpError,
    DonePayload,
    ErrorCode,
    ExecutorConstraints,
    InvalidTransition,
    LeaseConfig,
    Message,
    MessageType,
    TaskSpec,
    format_timestamp,
    mode_at_most,
    negotiate_lease,
    utc_now,
)
from .transport import TransportRegistry, default_registry
from .transport.base import ExecutorSession
from .transport.handles import ARCHIVE, GIT, LOOPBACK, STORAGE, TransportCapabilities
from .transport.workspace import WorkspaceManifest, build_manifest, remove_tree
from .wire.server import UnknownDelegation
from .wire.sse import EventLog

logger = logging.getLogger(__name__)

_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,127}$")
# clocks on the two sides are never perfectly aligned
LEASE_SKEW = timedelta(seconds=2)


@dataclass
class ExecutorPolicy:
    work_dir_base: str
    max_ttl_seconds: int | None = None
    allowed_modes: tuple[str, ...] = LEASE_MODES
    max_concurrent_assignments: int = 4
    accepted_transport_kinds: tuple[str, ...] = (ARCHIVE, STORAGE, GIT, LOOPBACK)
    pending_timeout: float = 120.0
    ack_timeout: float = 60.0
    snapshot_interval: float | None = 30.0
    tick: float = 0.1
    # terminal logs stay around this long after release for late replays
    log_retention: float = 600.0

    def __post_init__(self):
        if self.max_concurrent_assignments < 1:
            raise ValueError("maxConcurrentAssignments must be >= 1")
        if not self.allowed_modes:
            raise ValueError("allowedModes must be non-empty")

    @property
    def constraints(self) -> ExecutorConstraints:
        return ExecutorConstraints(tuple(self.allowed_modes), self.max_ttl_seconds)


@dataclass
class AssignmentRecord:
    delegation_id: str
    work_dir: str
    effective_lease: LeaseConfig
    task: TaskSpec
    transport_kind: str
    created_at: datetime
    state: AssignmentState = AssignmentState.PENDING
    active_lease: object = None
    capabilities: TransportCapabilities | None = None
    history: list[dict] = field(default_factory=list)
    outcome: BackendOutcome | None = None
    error: dict | None = None
    released: bool = False
    release_at: float | None = None
    ack_received: bool = False
    backend_pid: int | None = None
    last_snapshot: float = 0.0

    def __post_init__(self):
        self.lock = threading.RLock()
        self.session: ExecutorSession | None = None
        self.baseline: WorkspaceManifest | None = None
        self.ctx: BackendContext | None = None
        self.worker: threading.Thread | None = None
        self.released_at: float | None = None

    def to_dict(self) -> dict:
        return {
            "delegationId": self.delegation_id,
            "state": self.state.value,
            "workDir": self.work_dir,
            "effectiveLease": self.effective_lease.to_dict(),
            "activeLease": self.active_lease.to_dict() if self.active_lease else None,
            "transportKind": self.transport_kind,
            "capabilities": self.capabilities.to_dict() if self.capabilities else None,
            "history": list(self.history),
            "error": self.error,
            "released": self.released,
        }


class ExecutorService:
    """Thread-based executor. Every mutation of one assignment runs under its lock."""

    def __init__(
        self,
        policy: ExecutorPolicy,
        backend: Backend,
        registry: TransportRegistry | None = None,
        clock: Callable[[], datetime] = utc_now,
    ):
        self.policy = policy
        self.backend = backend
        self.registry = registry or default_registry()
        self.clock = clock
        self.records: dict[str, AssignmentRecord] = {}
        self.logs: dict[str, EventLog] = {}
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._ticker: threading.Thread | None = None
        os.makedirs(policy.work_dir_base, exist_ok=True)

    # ------------------------------------------------------------------ lifecycle

    def start(self) -> "ExecutorService":
        if self._ticker is None:
            self._ticker = threading.Thread(target=self._tick_loop, daemon=True, name="awcp-executor-tick")
            self._ticker.start()
        return self

    def close(self, drain: float = 5.0) -> None:
        """Stop the ticker after failing every live assignment with SHUTDOWN."""
        for rec in list(self.records.values()):
            with rec.lock:
                if not rec.state.terminal:
                    self._fail(rec, ErrorCode.SHUTDOWN, "executor shutting down", AssignmentEvent.ERROR)
                    rec.release_at = time.monotonic()
        deadline = time.monotonic() + drain
        while time.monotonic() < deadline and any(self._releasable_pending(r) for r in self.records.values()):
            self.tick()
            time.sleep(0.02)
        self._stop.set()
        if self._ticker is not None:
            self._ticker.join(timeout=2.0)
        for log in self.logs.values():
            log.close()

    def _releasable_pending(self, rec: AssignmentRecord) -> bool:
        return rec.state.terminal and not rec.released and rec.release_at is not None

    def _tick_loop(self) -> None:
        while not self._stop.wait(self.policy.tick):
            try:
                self.tick()
            except Exception:
                logger.exception("executor tick failed")

    # ------------------------------------------------------------------ helpers

    def get(self, delegation_id: str) -> AssignmentRecord:
        rec = self.records.get(delegation_id)
        if rec is None:
            raise UnknownDelegation(f"no assignment {delegation_id}")
        return rec

    def event_log(self, delegation_id: str) -> EventLog:
        log = self.logs.get(delegation_id)
        if log is None:
            raise UnknownDelegation(f"no event stream for {delegation_id}")
        return log

    def _apply(self, rec: AssignmentRecord, event: AssignmentEvent) -> bool:
        try:
            nxt = assignment_transition(rec.state, event)
        except InvalidTransition as exc:
            logger.info("%s: ignored %s", rec.delegation_id, exc)
            return False
        rec.history.append({"at": format_timestamp(self.clock()), "from": rec.state.value, "event": event.value, "state": nxt.value})
        rec.state = nxt
        logger.debug("%s: %s -> %s", rec.delegation_id, event.value, nxt.value)
        return True

    def _emit(self, rec: AssignmentRecord, name: str, data: dict) -> None:
        log = self.logs[rec.delegation_id]
        if not log.closed:
            log.append(name, data)

    def _emit_error(self, rec: AssignmentRecord, code: ErrorCode, message: str, hint: str | None = None) -> None:
        msg = Message.error(rec.delegation_id, code, message, hint)
        rec.error = msg.payload.to_dict()
        self._emit(rec, "error", msg.to_dict())

    def _live_count(self) -> int:
        return sum(1 for r in self.records.values() if not r.released)

    # ------------------------------------------------------------------ routes

    def handle_invite(self, msg: Message) -> Message:
        did = msg.delegation_id
        invite = msg.payload
        if not _ID_RE.match(did):
            return Message.error(did, ErrorCode.MALFORMED_MESSAGE, "delegation id must be a simple token")
        with self._lock:
            if did in self.records:
                return Message.error(did, ErrorCode.DUPLICATE, f"delegation {did} already known")
            kind = invite.transport
            if kind not in self.policy.accepted_transport_kinds or kind not in self.registry.executor_kinds:
                return Message.error(did, ErrorCode.DECLINED, f"transport {kind!r} not accepted here")
            if self._live_count() >= self.policy.max_concurrent_assignments:
                return Message.error(did, ErrorCode.DECLINED, "executor at capacity", "retry later")
            constraints = self.policy.constraints
            try:
                effective = negotiate_lease(invite.lease, constraints)
            except AwcpError as exc:
                return Message.error(did, ErrorCode.DECLINED, exc.message)
            if kind == LOOPBACK and effective.mode == READ_ONLY:
                return Message.error(
                    did, ErrorCode.DECLINED, "live projection cannot be made read-only", "use archive, storage or git"
                )
            try:
                self.registry.executor(kind).verify_prerequisites()
            except AwcpError as exc:
                return Message.error(did, ErrorCode.DECLINED, exc.message, exc.hint)
            work_dir = os.path.join(self.policy.work_dir_base, did)
            os.makedirs(work_dir)
            rec = AssignmentRecord(did, work_dir, effective, invite.task, kind, self.clock())
            rec.release_at = None
            self.records[did] = rec
            self.logs[did] = EventLog()
        logger.info("accepted %s (%s, %s, ttl=%ss)", did, kind, effective.mode, effective.ttl_seconds)
        return Message.build(MessageType.ACCEPT, did, AcceptPayload(work_dir, constraints))

    def handle_start(self, msg: Message) -> Message | None:
        rec = self.get(msg.delegation_id)
        start = msg.payload
        with rec.lock:
            if rec.state is not AssignmentState.PENDING:
                raise AwcpError(f"assignment is {rec.state.value}, not pending", ErrorCode.INVALID_STATE)
            now = self.clock()
            lease = start.lease
            cap = now + timedelta(seconds=rec.effective_lease.ttl_seconds) + LEASE_SKEW
            if not mode_at_most(lease.mode, rec.effective_lease.mode) or lease.expires_at > cap:
                return self._reject_start(rec, ErrorCode.LEASE_VIOLATION, "START lease exceeds the negotiated constraints")
            if lease.is_expired(now):
                return self._reject_start(rec, ErrorCode.LEASE_EXPIRED, "lease already expired at START")
            if start.transport.kind != rec.transport_kind:
                return self._reject_start(rec, ErrorCode.MALFORMED_MESSAGE, "START transport differs from INVITE")
            adapter = self.registry.executor(rec.transport_kind)
            try:
                adapter.verify_prerequisites()
                session = adapter.provision(start.transport, rec.work_dir, lease.mode)
            except AwcpError as exc:
                return self._reject_start(rec, exc.code, exc.message, exc.hint)
            except Exception as exc:
                logger.exception("%s: provisioning failed", rec.delegation_id)
                return self._reject_start(rec, ErrorCode.TRANSPORT_FAILED, str(exc))
            rec.session = session
            rec.capabilities = session.capabilities
            rec.active_lease = lease
            if lease.mode == READ_ONLY:
                rec.baseline = build_manifest(rec.work_dir)
            rec.last_snapshot = time.monotonic()
            self._emit(rec, "status", {"state": "running"})
            self._apply(rec, AssignmentEvent.RECV_START)
            ctx = BackendContext(
                rec.delegation_id,
                rec.work_dir,
                rec.task,
                lease.mode,
                format_timestamp(lease.expires_at),
                emit=lambda line, r=rec: self._progress(r, line),
            )
            rec.ctx = ctx
            rec.worker = threading.Thread(target=self._run_backend, args=(rec,), daemon=True, name=f"awcp-backend-{rec.delegation_id}")
            rec.worker.start()
        return None

    def _reject_start(self, rec: AssignmentRecord, code, message: str, hint: str | None = None) -> Message:
        code = ErrorCode(code)
        self._emit_error(rec, code, message, hint)
        self._apply(rec, AssignmentEvent.ERROR)
        if rec.session is None:
            remove_tree(rec.work_dir)
            rec.released = True
            rec.released_at = time.monotonic()
        return Message.error(rec.delegation_id, code, message, hint)

    def handle_ack(self, delegation_id: str) -> None:
        rec = self.get(delegation_id)
        with rec.lock:
            if not rec.state.terminal:
                raise AwcpError(f"nothing to acknowledge, assignment is {rec.state.value}", ErrorCode.INVALID_STATE)
            if rec.ack_received:
                return
            rec.ack_received = True
            rec.release_at = time.monotonic()
            self._maybe_release(rec)

    def handle_error(self, msg: Message) -> None:
        """The delegator cancelled, expired or gave up on the delegation."""
        rec = self.get(msg.delegation_id)
        err = msg.payload
        with rec.lock:
            if rec.state.terminal:
                return
            event = AssignmentEvent.CANCEL if err.code == ErrorCode.CANCELLED.value else AssignmentEvent.ERROR
            self._fail(rec, ErrorCode(err.code), err.message, event)
            rec.release_at = time.monotonic()
            self._maybe_release(rec)

    # ------------------------------------------------------------------ execution

    def _progress(self, rec: AssignmentRecord, line: str) -> None:
        with rec.lock:
            if rec.state is AssignmentState.ACTIVE:
                self._emit(rec, "status", {"state": "running", "message": line})

    def _run_backend(self, rec: AssignmentRecord) -> None:
        try:
            outcome = self.backend.run(rec.ctx)
        except Exception as exc:
            logger.exception("%s: backend crashed", rec.delegation_id)
            outcome = BackendOutcome(False, f"backend crashed: {exc}")
        rec.backend_pid = rec.ctx.pid
        self.finalize_assignment(rec, outcome)

    def finalize_assignment(self, rec: AssignmentRecord, outcome: BackendOutcome) -> None:
        with rec.lock:
            rec.outcome = outcome
            if rec.state is not AssignmentState.ACTIVE:
                logger.info("%s: backend finished after %s; outcome dropped", rec.delegation_id, rec.state.value)
                self._maybe_release(rec)
                return
            if outcome.success and rec.baseline is not None and build_manifest(rec.work_dir) != rec.baseline:
                outcome = BackendOutcome(False, "backend modified a read-only workspace")
                self._fail(rec, ErrorCode.LEASE_VIOLATION, outcome.summary, AssignmentEvent.ERROR)
            elif not outcome.success:
                self._fail(rec, ErrorCode.BACKEND_FAILED, outcome.summary, AssignmentEvent.ERROR)
            else:
                self._complete(rec, outcome)
            rec.release_at = time.monotonic() + self.policy.ack_timeout

    def _complete(self, rec: AssignmentRecord, outcome: BackendOutcome) -> None:
        if self._wants_snapshots(rec):
            try:
                snap = rec.session.capture_snapshot(recommended=True)
            except Exception as exc:
                logger.warning("%s: final snapshot failed: %s", rec.delegation_id, exc)
                self._fail(rec, ErrorCode.SNAPSHOT_FAILED, f"final snapshot failed: {exc}", AssignmentEvent.ERROR)
                return
            self._emit(rec, "snapshot", snap.to_dict())
        done = Message.build(MessageType.DONE, rec.delegation_id, DonePayload(outcome.summary, tuple(outcome.highlights)))
        self._emit(rec, "done", done.to_dict())
        self._apply(rec, AssignmentEvent.TASK_COMPLETE)
        self._detach(rec)

    def _wants_snapshots(self, rec: AssignmentRecord) -> bool:
        caps = rec.capabilities
        return bool(
            caps and caps.supports_snapshots and not caps.live_sync and rec.active_lease.mode == READ_WRITE
        )

    def _fail(self, rec: AssignmentRecord, code: ErrorCode, message: str, event: AssignmentEvent) -> None:
        if rec.ctx is not None:
            rec.ctx.cancelled.set()
        self._emit_error(rec, code, message)
        self._apply(rec, event)
        self._detach(rec)

    def _detach(self, rec: AssignmentRecord) -> None:
        if rec.session is None:
            return
        try:
            rec.session.detach()
        except Exception:
            logger.exception("%s: detach failed", rec.delegation_id)

    def _maybe_release(self, rec: AssignmentRecord) -> None:
        """Release once terminal, due, and the backend has stopped touching the work dir."""
        if rec.released or not rec.state.terminal or rec.release_at is None:
            return
        if time.monotonic() < rec.release_at:
            return
        if rec.worker is not None and rec.worker.is_alive():
            return
        try:
            if rec.session is not None:
                rec.session.teardown()
            remove_tree(rec.work_dir)
        except Exception:
            logger.exception("%s: release failed; will retry", rec.delegation_id)
            return
        rec.released = True
        rec.released_at = time.monotonic()
        logger.info("%s: released (%s)", rec.delegation_id, rec.state.value)

    # ------------------------------------------------------------------ timers

    def tick(self) -> None:
        now = self.clock()
        mono = time.monotonic()
        for rec in list(self.records.values()):
            with rec.lock:
                if rec.state is AssignmentState.PENDING:
                    age = (now - rec.created_at).total_seconds()
                    if age >= self.policy.pending_timeout:
                        self._fail(rec, ErrorCode.LEASE_EXPIRED, "START never arrived", AssignmentEvent.ERROR)
                        rec.release_at = mono
                elif rec.state is AssignmentState.ACTIVE:
                    if rec.active_lease.is_expired(now):
                        self.abort_on_lease_expiry(rec, now)
                    elif self._snapshot_due(rec, mono):
                        self._periodic_snapshot(rec, mono)
                self._maybe_release(rec)
                if rec.released and mono - (rec.released_at or mono) > self.policy.log_retention:
                    with self._lock:
                        self.records.pop(rec.delegation_id, None)
                        self.logs.pop(rec.delegation_id, None)

    def abort_on_lease_expiry(self, rec: AssignmentRecord, now: datetime) -> None:
        with rec.lock:
            if rec.state is not AssignmentState.ACTIVE or not rec.active_lease.is_expired(now):
                return
            logger.info("%s: lease expired, terminating backend", rec.delegation_id)
            self._fail(rec, ErrorCode.LEASE_EXPIRED, "lease expired before the task finished", AssignmentEvent.ERROR)
            rec.release_at = time.monotonic()

    def _snapshot_due(self, rec: AssignmentRecord, mono: float) -> bool:
        interval = self.policy.snapshot_interval
        return bool(interval) and self._wants_snapshots(rec) and mono - rec.last_snapshot >= interval

    def _periodic_snapshot(self, rec: AssignmentRecord, mono: float) -> None:
        rec.last_snapshot = mono
        try:
            snap = rec.session.capture_snapshot(recommended=False)
        except Exception as exc:
            logger.warning("%s: periodic snapshot failed: %s", rec.delegation_id, exc)
            return
        self._emit(rec, "snapshot", snap.to_dict())

