"""Named end-to-end scenarios with scripted backends."""

from __future__ import annotations

import os
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable

from ..backends import Backend, BackendOutcome, CallableBackend, CommandBackend
from ..delegator import AUTO, AdmissionPolicy, DelegatorService
from ..executor import ExecutorPolicy, ExecutorService
from ..lifecycle import DelegationState
from ..protocol import EnvironmentDeclaration, LeaseConfig, TaskSpec, parse_timestamp
from ..transport import default_registry
from ..transport.handles import ARCHIVE, LOOPBACK
from ..transport.workspace import build_manifest
from ..wire.server import ExecutorServer


@dataclass
class ScenarioReport:
    name: str
    ok: bool = True
    failures: list[str] = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def expect(self, cond: bool, message: str) -> None:
        if not cond:
            self.ok = False
            self.failures.append(message)


class Stage:
    """One delegator and one executor over loopback HTTP, in a scratch dir."""

    def __init__(self, backend: Backend, base: str | None = None):
        self.base = base or tempfile.mkdtemp(prefix="awcp-scenario-")
        self.own = base is None
        self.registry = default_registry(os.path.join(self.base, "tmp"))
        self.executor = ExecutorService(
            ExecutorPolicy(os.path.join(self.base, "exec"), snapshot_interval=None, tick=0.02), backend, self.registry
        ).start()
        self.server = ExecutorServer(self.executor).start()
        self.delegator = DelegatorService(os.path.join(self.base, "state"), AdmissionPolicy([self.base]), self.registry)

    def workspace(self, name: str, files: dict[str, bytes]) -> str:
        root = os.path.join(self.base, name)
        for rel, data in files.items():
            path = os.path.join(root, rel)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "wb") as f:
                f.write(data)
        os.makedirs(root, exist_ok=True)
        return root

    def delegate(self, root: str, description: str, transport: str = ARCHIVE, policy: str = AUTO, ttl: int = 120):
        rec = self.delegator.delegate(
            TaskSpec(description, description), LeaseConfig(ttl), EnvironmentDeclaration(), root, transport, self.server.url, policy
        )
        return self.delegator.wait_terminal(rec.delegation_id, 30)

    def close(self) -> None:
        self.delegator.close()
        self.server.stop()
        self.executor.close()
        if self.own:
            shutil.rmtree(self.base, ignore_errors=True)


# ---------------------------------------------------------------------------
# curation: reorganize files into labelled subdirectories

CURATION_FILES = {
    "beach.jpg": b"jpeg-1",
    "mountain.jpg": b"jpeg-2",
    "notes.txt": b"some notes",
    "report.pdf": b"%PDF-1.4",
    "song.mp3": b"ID3",
}
CURATION_LABELS = {".jpg": "images", ".txt": "documents", ".pdf": "documents", ".mp3": "audio"}


def curate(ctx) -> BackendOutcome:
    moved = 0
    for name in sorted(os.listdir(ctx.work_dir)):
        src = os.path.join(ctx.work_dir, name)
        label = CURATION_LABELS.get(os.path.splitext(name)[1])
        if label and os.path.isfile(src):
            os.makedirs(os.path.join(ctx.work_dir, label), exist_ok=True)
            os.replace(src, os.path.join(ctx.work_dir, label, name))
            moved += 1
            ctx.emit(f"moved {name} -> {label}/")
    return BackendOutcome(True, f"sorted {moved} files", [f"{moved} files labelled"])


def scenario_curation() -> ScenarioReport:
    report = ScenarioReport("curation")
    stage = Stage(CallableBackend(curate))
    try:
        root = stage.workspace("photos", CURATION_FILES)
        rec = stage.delegate(root, "sort files into labelled folders")
        report.expect(rec.state is DelegationState.COMPLETED, f"state {rec.state.value}")
        expected = sorted(f"{CURATION_LABELS[os.path.splitext(n)[1]]}/{n}" for n in CURATION_FILES)
        got = build_manifest(root).paths
        report.expect(got == expected, f"layout {got} != {expected}")
        report.details = {"delegationId": rec.delegation_id, "layout": got}
    finally:
        stage.close()
    return report


# ---------------------------------------------------------------------------
# two-round compliance review

COMPLIANCE_SCRIPT = r"""
import os, sys
wd = os.environ["AWCP_WORKDIR"]
print("reviewing contract")
if not os.path.exists(os.path.join(wd, "identity_verification.pdf")):
    print("AWCP_SUMMARY: missing identity verification document")
    sys.exit(1)
with open(os.path.join(wd, "contract_signed.txt"), "w") as f:
    f.write("signed: " + open(os.path.join(wd, "contract.txt")).read())
print("AWCP_HIGHLIGHT: identity verified")
print("AWCP_SUMMARY: contract signed")
"""


def compliance_backend() -> CommandBackend:
    return CommandBackend([sys.executable, "-c", COMPLIANCE_SCRIPT])


def scenario_two_round_compliance() -> ScenarioReport:
    report = ScenarioReport("two-round-compliance")
    stage = Stage(compliance_backend())
    try:
        root = stage.workspace("deal", {"contract.txt": b"terms and conditions\n"})
        first = stage.delegate(root, "review and sign the contract")
        report.expect(first.state is DelegationState.ERROR, f"round 1 ended {first.state.value}")
        msg = (first.error or {}).get("message", "")
        report.expect("missing identity verification" in msg, f"round 1 error {first.error}")
        with open(os.path.join(root, "identity_verification.pdf"), "wb") as f:
            f.write(b"%PDF id")
        second = stage.delegate(root, "review and sign the contract, identity attached")
        report.expect(second.state is DelegationState.COMPLETED, f"round 2 ended {second.state.value}")
        signed = os.path.join(root, "contract_signed.txt")
        report.expect(os.path.exists(signed), "contract_signed.txt not delivered")
        report.expect(second.delegation_id != first.delegation_id, "delegation ids collide")
        report.expect(bool(second.applied_snapshot_ids), "round 2 delivered no snapshot")
        report.details = {
            "rounds": [
                {"delegationId": r.delegation_id, "state": r.state.value, "error": r.error, "history": r.history}
                for r in (first, second)
            ]
        }
    finally:
        stage.close()
    return report


# ---------------------------------------------------------------------------
# live sync over the loopback projection


def scenario_live_sync() -> ScenarioReport:
    report = ScenarioReport("live-sync")
    seen: dict = {}
    origin: dict = {}

    def write_live(ctx) -> BackendOutcome:
        with open(os.path.join(ctx.work_dir, "live.txt"), "w") as f:
            f.write("written mid-run\n")
        target = os.path.join(origin["root"], "live.txt")
        deadline = time.monotonic() + 5
        while not os.path.exists(target) and time.monotonic() < deadline:
            time.sleep(0.01)
        seen["visible"] = os.path.exists(target)
        seen["mtime"] = os.stat(target).st_mtime if seen["visible"] else None
        return BackendOutcome(True, "wrote live.txt")

    stage = Stage(CallableBackend(write_live))
    try:
        root = origin["root"] = stage.workspace("live", {"a.txt": b"a"})
        rec = stage.delegate(root, "write through the live projection", transport=LOOPBACK, policy="staged")
        report.expect(rec.state is DelegationState.COMPLETED, f"state {rec.state.value}")
        report.expect(bool(seen.get("visible")), "write never reached the origin")
        report.expect(rec.snapshot_events == 0, f"{rec.snapshot_events} snapshot events on a live transport")
        report.expect(rec.effective_policy == AUTO, f"effective policy {rec.effective_policy}")
        done_at = next(parse_timestamp(h["at"]).timestamp() for h in rec.history if h["event"] == "RECV_DONE")
        report.expect(seen.get("mtime") is not None and seen["mtime"] <= done_at, "origin write did not precede done")
        report.details = {"delegationId": rec.delegation_id, "mtime": seen.get("mtime"), "doneAt": done_at}
    finally:
        stage.close()
    return report


SCENARIOS: dict[str, Callable[[], ScenarioReport]] = {
    "curation": scenario_curation,
    "two-round-compliance": scenario_two_round_compliance,
    "live-sync": scenario_live_sync,
}


def run_scenario(name: str) -> ScenarioReport:
    try:
        fn = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; known: {', '.join(SCENARIOS)}") from None
    return fn()
