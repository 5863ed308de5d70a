"""Command-line entry point: ``awcp serve | delegate | snapshots | status | cancel | recover | ...``.

Every mutation goes through :class:`DelegatorService` or :class:`ExecutorService`;
this module only parses arguments, wires services together and prints results.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from dataclasses import dataclass, field
from typing import Any

from . import __version__
from .backends import Backend, CommandBackend, HttpCallbackBackend
from .delegator import SNAPSHOT_POLICIES, AdmissionDenied, AdmissionPolicy, DelegatorService, summarize
from .executor import ExecutorPolicy, ExecutorService
from .lifecycle import DelegationState, conformance_fixture
from .protocol import READ_ONLY, READ_WRITE, AwcpError, EnvironmentDeclaration, LeaseConfig, MessageError, TaskSpec, format_timestamp
from .transport import default_registry
from .transport.blobstore import BlobStore
from .wire.server import ExecutorServer

logger = logging.getLogger("awcp")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

ROLES = ("delegator", "executor")


class ConfigError(Exception):
    pass


@dataclass
class CliConfig:
    """Merged view of the JSON config file and command-line flags."""

    role: str = "delegator"
    state_dir: str | None = None
    admission: dict = field(default_factory=dict)
    executor: dict = field(default_factory=dict)
    transport: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    listen: dict = field(default_factory=dict)
    token: str | None = None

    @classmethod
    def load(cls, path: str | None) -> "CliConfig":
        if not path:
            return cls()
        try:
            with open(path, encoding="utf-8") as f:
                raw = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        known = {"role", "stateDir", "admission", "executor", "transport", "backend", "listen", "token"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        role = raw.get("role", "delegator")
        if role not in ROLES:
            raise ConfigError(f"role must be one of {', '.join(ROLES)}, got {role!r}")
        blocks = {}
        for key in ("admission", "executor", "transport", "backend", "listen"):
            value = raw.get(key) or {}
            if not isinstance(value, dict):
                raise ConfigError(f"config block {key!r} must be an object")
            blocks[key] = value
        return cls(role=role, state_dir=raw.get("stateDir"), token=raw.get("token"), **blocks)

    def require_role(self, role: str) -> None:
        if self.role != role:
            raise ConfigError(f"this command needs a config with role={role}, got role={self.role}")


# ---------------------------------------------------------------------------
# wiring


def _state_dir(args, cfg: CliConfig) -> str:
    path = args.state_dir or cfg.state_dir or os.environ.get("AWCP_STATE_DIR")
    if not path:
        raise ConfigError("no state directory: pass --state-dir, set stateDir in the config, or export AWCP_STATE_DIR")
    return os.path.abspath(path)


def _registry(args, cfg: CliConfig, state_dir: str | None = None):
    t = cfg.transport
    return default_registry(
        temp_root=t.get("tempRoot") or (os.path.join(state_dir, "tmp") if state_dir else None),
        blob_store_url=getattr(args, "blob_store_url", None) or t.get("blobStoreUrl"),
        blob_store_secret=getattr(args, "blob_store_secret", None) or t.get("blobStoreSecret"),
        git_remote=getattr(args, "git_remote", None) or t.get("gitRemote"),
    )


def _admission(cfg: CliConfig, workspace: str | None) -> AdmissionPolicy:
    a = cfg.admission
    roots = a.get("allowedRoots")
    if roots is None:
        # no configured roots: the operator named the workspace explicitly.
        # Commands that never admit anything still need a non-empty list.
        roots = [workspace or os.getcwd()]
    kw: dict[str, Any] = {}
    if "maxTotalBytes" in a:
        kw["max_total_bytes"] = int(a["maxTotalBytes"])
    if "maxFileCount" in a:
        kw["max_file_count"] = int(a["maxFileCount"])
    if "denyPatterns" in a:
        kw["deny_patterns"] = tuple(a["denyPatterns"])
    if "followSymlinksOutsideRoot" in a:
        kw["follow_symlinks_outside_root"] = bool(a["followSymlinksOutsideRoot"])
    return AdmissionPolicy([os.path.abspath(r) for r in roots], **kw)


def _delegator(args, cfg: CliConfig, workspace: str | None = None, on_event=None) -> DelegatorService:
    state_dir = _state_dir(args, cfg)
    svc = DelegatorService(
        state_dir,
        _admission(cfg, workspace),
        _registry(args, cfg, state_dir),
        token=getattr(args, "token", None) or cfg.token,
        on_event=on_event,
    )
    return svc


def _backend(args, cfg: CliConfig) -> Backend:
    b = cfg.backend
    command = args.backend_command or b.get("command")
    url = args.callback_url or b.get("callbackUrl")
    if command and url:
        raise ConfigError("configure either a backend command or a callback URL, not both")
    if command:
        return CommandBackend(command, extra_env=b.get("env"))
    if url:
        return HttpCallbackBackend(url, timeout=float(b.get("timeout", 600)), token=b.get("token"))
    raise ConfigError("executor needs a backend: --backend-command, --callback-url, or a backend block in the config")


def _executor_policy(args, cfg: CliConfig) -> ExecutorPolicy:
    e = cfg.executor
    base = args.work_dir_base or e.get("workDirBase")
    if not base:
        state_dir = args.state_dir or cfg.state_dir or os.environ.get("AWCP_STATE_DIR")
        if not state_dir:
            raise ConfigError("executor needs --work-dir-base (or workDirBase / a state directory)")
        base = os.path.join(state_dir, "work")
    kw: dict[str, Any] = {}
    ttl = args.max_ttl if args.max_ttl is not None else e.get("maxTtlSeconds")
    if ttl is not None:
        kw["max_ttl_seconds"] = int(ttl)
    if "allowedModes" in e:
        kw["allowed_modes"] = tuple(e["allowedModes"])
    conc = args.max_concurrent if args.max_concurrent is not None else e.get("maxConcurrentAssignments")
    if conc is not None:
        kw["max_concurrent_assignments"] = int(conc)
    if "acceptedTransportKinds" in e:
        kw["accepted_transport_kinds"] = tuple(e["acceptedTransportKinds"])
    for key, attr in (
        ("pendingTimeoutSeconds", "pending_timeout"),
        ("ackTimeoutSeconds", "ack_timeout"),
        ("snapshotIntervalSeconds", "snapshot_interval"),
    ):
        if key in e:
            kw[attr] = e[key]
    return ExecutorPolicy(os.path.abspath(base), **kw)


# ---------------------------------------------------------------------------
# output helpers


def _emit(args, payload: Any, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def _table(rows: list[list[str]], headers: list[str]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(headers, *rows)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(headers, widths))]
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


def _describe(rec) -> str:
    s = summarize(rec)
    lines = [
        f"delegation   {s['delegationId']}",
        f"state        {s['state']}",
        f"transport    {s['transport']}",
        f"policy       {s['policy']} (effective {s['effectivePolicy']})",
    ]
    if rec.effective_lease:
        lines.append(f"lease        {rec.effective_lease.mode}, {rec.effective_lease.ttl_seconds}s")
    if s["pendingSnapshots"]:
        lines.append(f"pending      {', '.join(s['pendingSnapshots'])}")
    if s["error"]:
        lines.append(f"error        {s['error'].get('code')}: {s['error'].get('message')}")
    if s["finalSummary"]:
        lines.append(f"summary      {s['finalSummary'].get('finalSummary')}")
    lines.append("history")
    lines.append(_table([[h["at"], h["from"], h["event"], h["state"]] for h in rec.history], ["at", "from", "event", "to"]))
    return "\n".join(lines)


def _status_payload(rec) -> dict:
    return {**summarize(rec), "history": rec.history, "appliedChanges": rec.applied_changes}


def _print_event(rec, ev) -> None:
    print(f"[{rec.delegation_id}] {ev.id} {ev.event_name} {json.dumps(ev.data, sort_keys=True)}", flush=True)


def _terminal_exit(rec) -> int:
    return EXIT_OK if rec.state is DelegationState.COMPLETED else EXIT_FAIL


# ---------------------------------------------------------------------------
# commands


def cmd_serve(args, cfg: CliConfig) -> int:
    if args.config:
        cfg.require_role("executor")
    policy = _executor_policy(args, cfg)
    backend = _backend(args, cfg)
    host = args.host or cfg.listen.get("host") or "127.0.0.1"
    port = args.port if args.port is not None else int(cfg.listen.get("port", 8765))
    registry = _registry(args, cfg, args.state_dir or cfg.state_dir)
    executor = ExecutorService(policy, backend, registry)
    try:
        server = ExecutorServer(executor, host, port, token=args.token or cfg.token)
    except OSError as exc:
        print(f"error: cannot listen on {host}:{port}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_FAIL
    stop = threading.Event()

    def on_signal(signum, frame):
        logger.info("received signal %d, shutting down", signum)
        stop.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    executor.start()
    server.start()
    logger.info("executor listening on %s (work dirs under %s)", server.url, policy.work_dir_base)
    print(f"listening on {server.url}", flush=True)
    try:
        while not stop.wait(0.5):
            pass
    finally:
        executor.close()
        server.stop(grace=2.0)
    logger.info("executor stopped")
    return EXIT_OK


def cmd_delegate(args, cfg: CliConfig) -> int:
    if args.config:
        cfg.require_role("delegator")
    if not os.path.isdir(args.workspace):
        print(f"error: workspace {args.workspace} is not a directory", file=sys.stderr)
        return EXIT_USAGE
    workspace = os.path.abspath(args.workspace)
    svc = _delegator(args, cfg, workspace, on_event=_print_event if args.watch else None)
    svc.start_scanner()
    try:
        env = EnvironmentDeclaration.from_dict(json.loads(args.env)) if args.env else EnvironmentDeclaration()
        task = TaskSpec(args.task, args.prompt or args.task)
        lease = LeaseConfig(args.ttl, args.mode)
    except (MessageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        svc.close()
        return EXIT_USAGE
    transport = args.transport or cfg.transport.get("default") or "archive"
    try:
        rec = svc.create_and_invite(task, lease, env, workspace, transport, args.executor, args.policy)
        print(rec.delegation_id, flush=True)
        if rec.state is DelegationState.ACCEPTED:
            rec = svc.start_delegation(rec.delegation_id)
        if not rec.state.terminal:
            rec = svc.wait_terminal(rec.delegation_id, timeout=args.timeout)
    except AdmissionDenied as exc:
        print(f"error: ADMISSION_DENIED: {exc.message}", file=sys.stderr)
        if exc.record is not None:
            print(exc.record.delegation_id, flush=True)
        return EXIT_FAIL
    except AwcpError as exc:
        print(f"error: {exc.code.value}: {exc.message}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        svc.close()
    if rec.error:
        print(f"error: {rec.error.get('code')}: {rec.error.get('message')}", file=sys.stderr)
    if not rec.state.terminal:
        print(f"error: delegation still {rec.state.value} after {args.timeout}s; run 'awcp recover' to resume", file=sys.stderr)
    _emit(args, _status_payload(rec), _describe(rec))
    return _terminal_exit(rec)


def cmd_snapshots(args, cfg: CliConfig) -> int:
    svc = _delegator(args, cfg)
    try:
        if args.action == "list":
            rec = svc.get(args.delegation_id)
            rows = [
                [s.snapshot_id, format_timestamp(s.captured_at), "yes" if s.recommended else "", f"{len(s.data)}b"]
                for s in rec.pending_snapshots
            ]
            payload = [
                {k: v for k, v in s.to_dict().items() if k != "data"} | {"dataBytes": len(s.data)} for s in rec.pending_snapshots
            ]
            table = _table(rows, ["snapshot", "captured", "recommended", "size"])
            _emit(args, payload, table if rows else "no pending snapshots")
            return EXIT_OK
        if not args.snapshot_id:
            print(f"error: {args.action} needs a snapshot id", file=sys.stderr)
            return EXIT_USAGE
        if args.action == "approve":
            summary = svc.approve_snapshot(args.delegation_id, args.snapshot_id)
            d = summary.to_dict()
            text = "\n".join(f"{k:<9} {', '.join(v) if v else '-'}" for k, v in d.items() if isinstance(v, list))
            _emit(args, d, text)
        else:
            svc.discard_snapshot(args.delegation_id, args.snapshot_id)
            _emit(args, {"discarded": args.snapshot_id}, f"discarded {args.snapshot_id}")
        return EXIT_OK
    except AwcpError as exc:
        print(f"error: {exc.code.value}: {exc.message}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        svc.close()


def cmd_status(args, cfg: CliConfig) -> int:
    svc = _delegator(args, cfg)
    try:
        if args.delegation_id:
            rec = svc.get(args.delegation_id)
            _emit(args, _status_payload(rec), _describe(rec))
            return EXIT_OK
        recs = svc.list_records()
        rows = [[r.delegation_id, r.state.value, r.transport_kind, r.snapshot_policy, len(r.pending_snapshots)] for r in recs]
        _emit(args, [summarize(r) for r in recs], _table(rows, ["delegation", "state", "transport", "policy", "pending"]) if rows else "no delegations")
        return EXIT_OK
    except AwcpError as exc:
        print(f"error: {exc.code.value}: {exc.message}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        svc.close()


def cmd_cancel(args, cfg: CliConfig) -> int:
    svc = _delegator(args, cfg)
    try:
        rec = svc.cancel_delegation(args.delegation_id)
    except AwcpError as exc:
        print(f"error: {exc.code.value}: {exc.message}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        svc.close()
    _emit(args, _status_payload(rec), f"{rec.delegation_id} {rec.state.value}")
    return EXIT_OK if rec.state is DelegationState.CANCELLED else EXIT_FAIL


def cmd_recover(args, cfg: CliConfig) -> int:
    svc = _delegator(args, cfg, on_event=_print_event if args.watch else None)
    try:
        recovered = svc.recover_all()
        svc.start_scanner()
        resumed = [r.delegation_id for r in recovered if not r.state.terminal]
        final = []
        for did in resumed:
            final.append(svc.wait_terminal(did, timeout=args.timeout))
    except AwcpError as exc:
        print(f"error: {exc.code.value}: {exc.message}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        svc.close()
    by_id = {r.delegation_id: r for r in final}
    rows = []
    for r in recovered:
        r = by_id.get(r.delegation_id, r)
        rows.append([r.delegation_id, r.state.value, "resumed" if r.delegation_id in by_id else ""])
    payload = {
        "recovered": [summarize(by_id.get(r.delegation_id, r)) for r in recovered],
        "resumed": resumed,
        "unreadable": [r.delegation_id for r in svc.recovery_failures],
    }
    _emit(args, payload, _table(rows, ["delegation", "state", ""]) if rows else "nothing to recover")
    if svc.recovery_failures:
        return EXIT_FAIL
    return EXIT_OK if all(r.state is DelegationState.COMPLETED for r in final) else EXIT_FAIL


def cmd_blobstore(args, cfg: CliConfig) -> int:
    secret = args.secret or cfg.transport.get("blobStoreSecret") or os.environ.get("AWCP_BLOB_SECRET")
    if not secret:
        print("error: a signing secret is required (--secret or AWCP_BLOB_SECRET)", file=sys.stderr)
        return EXIT_USAGE
    try:
        store = BlobStore(secret, args.host, args.port)
    except OSError as exc:
        print(f"error: cannot listen on {args.host}:{args.port}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_FAIL
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    store.start()
    print(f"blob store on {store.base_url}", flush=True)
    while not stop.wait(0.5):
        pass
    store.stop()
    return EXIT_OK


def cmd_fixture(args, cfg: CliConfig) -> int:
    text = json.dumps(conformance_fixture(), indent=2) + "\n"
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_harness(args, cfg: CliConfig) -> int:
    from .harness.runner import run_randomized_suite

    transports = tuple(t for t in args.transports.split(",") if t)
    report = run_randomized_suite(args.runs, args.seed, args.parallelism, transports, args.fault_rate)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(report.to_json())
    summary = report.summary()
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        for key, value in summary.items():
            print(f"{key:<20} {value}")
        for run in report.failures[:10]:
            print(f"FAIL run {run.config['index']} ({run.delegation_id}): {'; '.join(run.violations)}")
    return EXIT_OK if not report.failures else EXIT_FAIL


def cmd_scenario(args, cfg: CliConfig) -> int:
    from .harness.scenarios import SCENARIOS, run_scenario

    names = list(SCENARIOS) if args.name == "all" else [args.name]
    ok = True
    out = []
    for name in names:
        try:
            report = run_scenario(name)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        ok &= report.ok
        out.append({"name": report.name, "ok": report.ok, "failures": report.failures, "details": report.details})
        if not args.json:
            print(f"{'PASS' if report.ok else 'FAIL'} {report.name}" + "".join(f"\n  {f}" for f in report.failures))
    if args.json:
        print(json.dumps(out, indent=2, sort_keys=True, default=str))
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--state-dir", help="delegation state directory (default: $AWCP_STATE_DIR)")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="awcp", description="Delegate a workspace to a remote executor and track it.")
    parser.add_argument("--version", action="version", version=f"awcp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", parents=[common], help="run an executor service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--work-dir-base")
    p.add_argument("--backend-command", help="command run inside each work dir")
    p.add_argument("--callback-url", help="POST each task to this URL instead of running a command")
    p.add_argument("--max-ttl", type=int)
    p.add_argument("--max-concurrent", type=int)
    p.add_argument("--token", help="bearer token required from delegators")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("delegate", parents=[common], help="delegate a workspace and wait for the outcome")
    p.add_argument("--workspace", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--prompt", help="agent prompt (defaults to the task text)")
    p.add_argument("--executor", required=True, help="executor base URL")
    p.add_argument("--transport", help="archive, storage, git, loopback or sshfs")
    p.add_argument("--ttl", type=int, default=600, help="lease length in seconds")
    p.add_argument("--mode", choices=(READ_ONLY, READ_WRITE), default=READ_WRITE)
    p.add_argument("--policy", choices=SNAPSHOT_POLICIES, default="auto")
    p.add_argument("--env", help="environment declaration as JSON")
    p.add_argument("--watch", action="store_true", help="print every event as it arrives")
    p.add_argument("--timeout", type=float, default=24 * 3600, help="give up waiting after this many seconds")
    p.add_argument("--token")
    p.add_argument("--blob-store-url")
    p.add_argument("--blob-store-secret")
    p.add_argument("--git-remote")
    p.set_defaults(func=cmd_delegate)

    p = sub.add_parser("snapshots", parents=[common], help="list, approve or discard staged snapshots")
    p.add_argument("action", choices=("list", "approve", "discard"))
    p.add_argument("delegation_id")
    p.add_argument("snapshot_id", nargs="?")
    p.set_defaults(func=cmd_snapshots)

    p = sub.add_parser("status", parents=[common], help="show one delegation, or all of them")
    p.add_argument("delegation_id", nargs="?")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("cancel", parents=[common], help="cancel a delegation")
    p.add_argument("delegation_id")
    p.add_argument("--token")
    p.set_defaults(func=cmd_cancel)

    p = sub.add_parser("recover", parents=[common], help="reload persisted delegations and resume their streams")
    p.add_argument("--watch", action="store_true")
    p.add_argument("--timeout", type=float, default=24 * 3600)
    p.add_argument("--token")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("blobstore", parents=[common], help="run the embedded pre-signed blob store")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8766)
    p.add_argument("--secret")
    p.set_defaults(func=cmd_blobstore)

    p = sub.add_parser("fixture", parents=[common], help="print the state-machine conformance fixture")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("harness", parents=[common], help="run the randomized fault-injection suite")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--fault-rate", type=float, default=0.5)
    p.add_argument("--transports", default="archive,storage,git,loopback")
    p.add_argument("--report", help="write the full JSON report here")
    p.set_defaults(func=cmd_harness)

    p = sub.add_parser("scenario", parents=[common], help="run a named end-to-end scenario")
    p.add_argument("name", help="curation, two-round-compliance, live-sync or all")
    p.set_defaults(func=cmd_scenario)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = CliConfig.load(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
