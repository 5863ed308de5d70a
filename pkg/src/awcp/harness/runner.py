"""Randomized in-process delegations over real loopback HTTP, with invariant checks."""

from __future__ import annotations

import json
import logging
import os
import random
import shutil
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from ..backends import BackendContext, BackendOutcome, CallableBackend
from ..delegator import AUTO, DISCARD, SNAPSHOT_POLICIES, STAGED, AdmissionPolicy, DelegatorService
from ..executor import ExecutorPolicy, ExecutorService
from ..lifecycle import DelegationState, load_conformance_fixture
from ..protocol import READ_ONLY, READ_WRITE, EnvironmentDeclaration, LeaseConfig, TaskSpec
from ..transport import default_registry
from ..transport.blobstore import BlobStore
from ..transport.git import init_bare_remote, remote_branches
from ..transport.handles import ARCHIVE, GIT, LOOPBACK, STORAGE, branch_for
from ..transport.workspace import WorkspaceManifest, build_manifest
from ..wire.http import shared_transport
from ..wire.server import ExecutorServer
from .clock import OffsetClock
from .faults import (
    CORRUPT_ARCHIVE_BYTE,
    CRASH_DELEGATOR_AFTER,
    DROP_START,
    DUPLICATE_DONE,
    EXPIRE_MID_RUN,
    FAULT_KINDS,
    FaultInjectingTransport,
    FaultSchedule,
)

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("edit", "noop")
# misbehaving backends count as faults: they only appear when fault_rate > 0
ADVERSARIAL_BACKENDS = ("fail", "rogue")
RUN_TTL = 60
TERMINAL_WAIT = 20.0


# ---------------------------------------------------------------------------
# invariant checks


@dataclass
class InvariantReport:
    ok: bool
    violations: list[str] = field(default_factory=list)


def _fixture_sets(fixture: dict) -> tuple[set, set]:
    d = {tuple(t) for t in fixture["delegation"]["transitions"]}
    a = {tuple(t) for t in fixture["assignment"]["transitions"]}
    return d, a


def check_invariants(
    transition_log: dict,
    fs_audit: list[str],
    fixture: dict | None = None,
    terminals: tuple[str | None, str | None] | None = None,
) -> InvariantReport:
    """Validate one run.

    ``transition_log`` maps ``"delegation"`` and ``"assignment"`` to lists of
    ``[state, event, next_state]``. ``fs_audit`` lists leftover artifacts.
    ``terminals`` is the (delegator, executor) final state pair.
    """
    fixture = fixture or load_conformance_fixture()
    legal_d, legal_a = _fixture_sets(fixture)
    violations = []
    for side, legal in (("delegation", legal_d), ("assignment", legal_a)):
        expected_from = fixture[side]["initial"]
        for triple in transition_log.get(side, []):
            t = tuple(triple)
            if t not in legal:
                violations.append(f"{side}: illegal transition {t}")
            elif t[0] != expected_from:
                violations.append(f"{side}: transition {t} does not continue from {expected_from}")
            expected_from = t[2]
    for item in fs_audit:
        violations.append(f"leftover: {item}")
    if terminals is not None:
        d, a = terminals
        if d == DelegationState.COMPLETED.value:
            if a != "completed":
                violations.append(f"pairing: delegator completed but executor {a}")
        elif d in ("error", "cancelled", "expired"):
            if a not in (None, "error"):
                violations.append(f"pairing: delegator {d} but executor {a}")
        else:
            violations.append(f"delegator not terminal: {d}")
    return InvariantReport(not violations, violations)


# ---------------------------------------------------------------------------
# shared infrastructure


class HarnessEnv:
    """Blob store, bare git remote and a scratch root shared by many runs."""

    def __init__(self, base_dir: str | None = None):
        self.own_base = base_dir is None
        self.base = base_dir or tempfile.mkdtemp(prefix="awcp-harness-")
        os.makedirs(self.base, exist_ok=True)
        self.blobs = BlobStore(secret="harness-secret").start()
        self.git_remote = init_bare_remote(os.path.join(self.base, "remote.git"))
        self.fixture = load_conformance_fixture()

    def close(self) -> None:
        self.blobs.stop()
        if self.own_base:
            shutil.rmtree(self.base, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# per-run plumbing


@dataclass
class RunConfig:
    index: int
    seed: int
    transport: str
    policy: str
    mode: str
    backend: str
    schedule: FaultSchedule

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.to_dict()
        return d


def plan_run(seed: int, index: int, transports=(ARCHIVE, STORAGE, GIT, LOOPBACK), fault_rate: float = 0.5, kinds=FAULT_KINDS) -> RunConfig:
    """Deterministic run parameters for (seed, index)."""
    rng = random.Random(f"run:{seed}:{index}")
    schedule = FaultSchedule.random(f"{seed}:{index}", fault_rate, kinds)
    choices = list(transports)
    if schedule.has(CORRUPT_ARCHIVE_BYTE):
        choices = [t for t in choices if t in (ARCHIVE, STORAGE)] or [ARCHIVE]
    transport = rng.choice(choices)
    policy = rng.choice(SNAPSHOT_POLICIES)
    mode = READ_WRITE if transport == LOOPBACK else rng.choice((READ_WRITE, READ_WRITE, READ_ONLY))
    backend = rng.choice(BACKEND_KINDS)
    if rng.random() < fault_rate * 0.4:
        backend = "rogue" if mode == READ_ONLY and rng.random() < 0.5 else "fail"
    if schedule.has(EXPIRE_MID_RUN):
        backend = "block"
    return RunConfig(index, seed, transport, policy, mode, backend, schedule)


def expected_outcome(cfg: RunConfig) -> tuple[str, str | None]:
    s = cfg.schedule
    if s.has(DROP_START):
        return "error", "CONNECTION_LOST"
    if s.has(CORRUPT_ARCHIVE_BYTE):
        return "error", "INTEGRITY_MISMATCH"
    if s.has(EXPIRE_MID_RUN):
        return "expired", "LEASE_EXPIRED"
    if cfg.backend == "fail":
        return "error", "BACKEND_FAILED"
    if cfg.backend == "rogue":
        return "error", "LEASE_VIOLATION"
    return "completed", None


def make_workspace(root: str, rng: random.Random) -> None:
    os.makedirs(root, exist_ok=True)
    for i in range(rng.randint(2, 6)):
        sub = rng.choice(["", "src", "docs", "src/pkg"])
        d = os.path.join(root, sub)
        os.makedirs(d, exist_ok=True)
        with open(os.path.join(d, f"file{i}.txt"), "wb") as f:
            f.write(rng.randbytes(rng.randint(0, 2048)))


class ScriptedBackends:
    """Backend behaviours keyed by name; records the executor-side final manifest."""

    def __init__(self, gate: threading.Event):
        self.gate = gate
        self.final: dict[str, WorkspaceManifest] = {}
        self.pids: dict[str, int] = {}

    def _wait_gate(self, ctx: BackendContext) -> bool:
        while not self.gate.wait(0.005):
            if ctx.cancelled.is_set():
                return False
        return True

    def make(self, kind: str, seed: str) -> CallableBackend:
        def run(ctx: BackendContext) -> BackendOutcome:
            ctx.emit(f"{kind} backend starting")
            if not self._wait_gate(ctx):
                return BackendOutcome(False, "cancelled")
            if kind == "block":
                ctx.cancelled.wait(TERMINAL_WAIT)
                return BackendOutcome(False, "blocked backend was cancelled")
            if kind == "fail":
                return BackendOutcome(False, "missing identity verification")
            if kind == "edit" and ctx.lease_mode == READ_WRITE or kind == "rogue":
                edit_tree(ctx.work_dir, random.Random(f"edit:{seed}"))
            self.final[ctx.delegation_id] = build_manifest(ctx.work_dir)
            return BackendOutcome(True, f"{kind} finished", [f"mode={ctx.lease_mode}"])

        return CallableBackend(run)


def edit_tree(work_dir: str, rng: random.Random) -> None:
    files = sorted(
        os.path.relpath(os.path.join(dp, n), work_dir)
        for dp, dns, fns in os.walk(work_dir)
        for n in fns
        if ".git" not in dp.split(os.sep)
    )
    files = [f for f in files if not f.startswith(".git")]
    if files:
        target = os.path.join(work_dir, files[0])
        os.chmod(target, 0o644)
        with open(target, "ab") as f:
            f.write(b"\nedited\n")
    if len(files) > 1:
        victim = os.path.join(work_dir, files[-1])
        os.chmod(os.path.dirname(victim), 0o755)
        os.unlink(victim)
    os.makedirs(os.path.join(work_dir, "out"), exist_ok=True)
    with open(os.path.join(work_dir, "out", f"result-{rng.randint(0, 999)}.txt"), "wb") as f:
        f.write(rng.randbytes(64))


def audit_run(env: HarnessEnv, delegation_id: str, exec_base: str, temp_root: str) -> list[str]:
    """Every artifact a delegation might leave behind."""
    leftovers = []
    if os.path.isdir(exec_base):
        leftovers += [f"workDir {os.path.join(exec_base, n)}" for n in os.listdir(exec_base)]
    if os.path.isdir(temp_root):
        leftovers += [f"temp {os.path.join(temp_root, n)}" for n in os.listdir(temp_root)]
    leftovers += [f"blob {k}" for k in env.blobs.keys(f"awcp/{delegation_id}/")]
    branch = branch_for(delegation_id)
    if remote_branches(env.git_remote, f"refs/heads/{branch}"):
        leftovers.append(f"branch {branch}")
    try:
        with open("/proc/mounts", encoding="utf-8") as f:
            leftovers += [f"mount {line.split()[1]}" for line in f if exec_base in line]
    except OSError:
        pass
    return leftovers


@dataclass
class RunResult:
    config: dict
    delegation_id: str
    expected: list
    delegator_state: str | None
    executor_state: str | None
    error_code: str | None
    transitions: dict
    audit: list[str]
    violations: list[str]
    ack_count: int
    duration: float

    @property
    def ok(self) -> bool:
        return not self.violations


def run_one(env: HarnessEnv, cfg: RunConfig) -> RunResult:
    t0 = time.monotonic()
    run_dir = tempfile.mkdtemp(prefix=f"run-{cfg.index}-", dir=env.base)
    ws = os.path.join(run_dir, "ws")
    exec_base = os.path.join(run_dir, "exec")
    temp_root = os.path.join(run_dir, "tmp")
    state_dir = os.path.join(run_dir, "state")
    os.makedirs(temp_root)
    make_workspace(ws, random.Random(f"ws:{cfg.seed}:{cfg.index}"))
    did = f"run-{cfg.seed}-{cfg.index}-{os.path.basename(run_dir).rsplit('-', 1)[-1]}"
    schedule = cfg.schedule
    crash = schedule.has(CRASH_DELEGATOR_AFTER)
    gate = threading.Event()
    if not crash or crash.when == "accepted":
        gate.set()
    clock = OffsetClock()
    backends = ScriptedBackends(gate)
    registry = default_registry(temp_root, env.blobs.base_url, env.blobs.secret, env.git_remote)
    executor = ExecutorService(
        ExecutorPolicy(exec_base, snapshot_interval=None, tick=0.01, ack_timeout=10.0, pending_timeout=30.0),
        backends.make(cfg.backend, f"{cfg.seed}:{cfg.index}"),
        registry,
        clock,
    ).start()
    server = ExecutorServer(executor).start()
    corrupt_index = int(schedule.has(CORRUPT_ARCHIVE_BYTE).when.split("#")[1]) if schedule.has(CORRUPT_ARCHIVE_BYTE) else 0
    proxy = FaultInjectingTransport(
        shared_transport(),
        schedule,
        corrupt_storage=lambda: env.blobs.corrupt(f"awcp/{did}/workspace.zip", corrupt_index),
    )

    def new_delegator() -> DelegatorService:
        return DelegatorService(
            state_dir, AdmissionPolicy([run_dir]), registry, http_transport=proxy, clock=clock, scan_interval=0.05
        ).start_scanner()

    violations: list[str] = []
    pre = build_manifest(ws)
    delegator = new_delegator()
    try:
        rec = delegator.create_and_invite(
            TaskSpec(f"harness run {cfg.index}", f"backend={cfg.backend}"),
            LeaseConfig(RUN_TTL, cfg.mode),
            EnvironmentDeclaration(),
            ws,
            cfg.transport,
            server.url,
            cfg.policy,
            delegation_id=did,
        )
        if crash and crash.when == "accepted":
            delegator.crash()
            delegator = new_delegator()
            delegator.recover_all()
        if rec.state is DelegationState.ACCEPTED:
            delegator.start_delegation(did)
        if crash and crash.when in ("started", "running"):
            if crash.when == "running":
                delegator.wait_for(did, lambda r: r.state is DelegationState.RUNNING or r.state.terminal, TERMINAL_WAIT)
            delegator.crash()
            delegator = new_delegator()
            delegator.recover_all()
            gate.set()
        if schedule.has(EXPIRE_MID_RUN):
            delegator.wait_for(did, lambda r: r.state is DelegationState.RUNNING or r.state.terminal, TERMINAL_WAIT)
            clock.advance(RUN_TTL + 5)
        rec = delegator.wait_terminal(did, TERMINAL_WAIT)
        violations += check_workspace(delegator, rec, cfg, ws, pre, backends.final.get(did))
        # give the executor its ACK-driven release
        arec = executor.records.get(did)
        deadline = time.monotonic() + 5.0
        while arec is not None and not arec.released and time.monotonic() < deadline:
            time.sleep(0.005)
        rec = delegator.get(did)
    except Exception as exc:
        logger.exception("run %s crashed", cfg.index)
        violations.append(f"harness exception: {exc!r}")
        rec = delegator.get(did) if delegator.store.exists(did) else None
    finally:
        delegator.close()
        server.stop()
        executor.close(drain=2.0)

    arec = executor.records.get(did)
    transitions = {
        "delegation": [[h["from"], h["event"], h["state"]] for h in (rec.history if rec else [])],
        "assignment": [[h["from"], h["event"], h["state"]] for h in (arec.history if arec else [])],
    }
    d_state = rec.state.value if rec else None
    a_state = arec.state.value if arec else None
    audit = audit_run(env, did, exec_base, temp_root)
    report = check_invariants(transitions, audit, env.fixture, (d_state, a_state))
    violations += report.violations
    expected = expected_outcome(cfg)
    code = (rec.error or {}).get("code") if rec else None
    if (d_state, code if expected[1] else None) != expected:
        violations.append(f"outcome: expected {expected}, got ({d_state}, {code})")
    if expected[0] == "expired" and (arec is None or (arec.error or {}).get("code") != "LEASE_EXPIRED"):
        violations.append(f"executor did not report LEASE_EXPIRED: {arec.error if arec else None}")
    acks = proxy.counts.get("ACK", 0)
    if acks > 1 or (schedule.has(DUPLICATE_DONE) and d_state == "completed" and acks != 1):
        violations.append(f"{acks} ACKs sent")
    shutil.rmtree(run_dir, ignore_errors=True)
    return RunResult(
        cfg.to_dict(), did, list(expected), d_state, a_state, code, transitions, audit, violations, acks, time.monotonic() - t0
    )


def check_workspace(delegator, rec, cfg: RunConfig, ws: str, pre: WorkspaceManifest, final: WorkspaceManifest | None) -> list[str]:
    """Data-plane expectations: what the delegator's workspace should look like now."""
    out = []
    now = build_manifest(ws)
    live = cfg.transport == LOOPBACK
    if rec.state is not DelegationState.COMPLETED:
        if not live and now != pre:
            out.append("workspace changed although the delegation failed")
        return out
    if cfg.mode == READ_ONLY or (cfg.policy == DISCARD and not live):
        if now != pre:
            out.append("workspace changed under read-only/discard")
        return out
    if cfg.policy == STAGED and not live:
        if now != pre:
            out.append("staged snapshot touched disk before approval")
        for snap in list(rec.pending_snapshots):
            delegator.approve_snapshot(rec.delegation_id, snap.snapshot_id)
        now = build_manifest(ws)
    if final is not None and now != final:
        out.append("delegator workspace differs from executor final state")
    if live and rec.snapshot_events:
        out.append("live transport produced snapshot events")
    return out


@dataclass
class SuiteReport:
    seed: int
    runs: list[RunResult]
    elapsed: float

    @property
    def failures(self) -> list[RunResult]:
        return [r for r in self.runs if not r.ok]

    @property
    def illegal_transitions(self) -> int:
        return sum(1 for r in self.runs for v in r.violations if "illegal transition" in v)

    @property
    def dirty_audits(self) -> int:
        return sum(1 for r in self.runs if r.audit)

    def summary(self) -> dict:
        by_state: dict[str, int] = {}
        by_fault: dict[str, int] = {}
        for r in self.runs:
            by_state[r.delegator_state or "none"] = by_state.get(r.delegator_state or "none", 0) + 1
            faults = r.config["schedule"]["faults"]
            key = faults[0]["kind"] if faults else "none"
            by_fault[key] = by_fault.get(key, 0) + 1
        return {
            "seed": self.seed,
            "runs": len(self.runs),
            "failed": len(self.failures),
            "illegalTransitions": self.illegal_transitions,
            "dirtyAudits": self.dirty_audits,
            "terminalStates": by_state,
            "faults": by_fault,
            "elapsedSeconds": round(self.elapsed, 2),
        }

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "runs": [asdict(r) for r in self.runs]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def run_randomized_suite(
    n: int,
    seed: int = 0,
    parallelism: int = 1,
    transports=(ARCHIVE, STORAGE, GIT, LOOPBACK),
    fault_rate: float = 0.5,
    kinds=FAULT_KINDS,
    env: HarnessEnv | None = None,
) -> SuiteReport:
    if n < 1:
        raise ValueError("n must be >= 1")
    own = env is None
    env = env or HarnessEnv()
    t0 = time.monotonic()
    try:
        plans = [plan_run(seed, i, transports, fault_rate, kinds) for i in range(n)]
        if parallelism <= 1:
            runs = [run_one(env, p) for p in plans]
        else:
            with ThreadPoolExecutor(parallelism) as pool:
                runs = list(pool.map(lambda p: run_one(env, p), plans))
    finally:
        if own:
            env.close()
    return SuiteReport(seed, runs, time.monotonic() - t0)


__all__ = [
    "AUTO",
    "HarnessEnv",
    "InvariantReport",
    "RunConfig",
    "RunResult",
    "SuiteReport",
    "check_invariants",
    "expected_outcome",
    "plan_run",
    "run_one",
    "run_randomized_suite",
]
