from __future__ import annotations

import json
import os
import signal
import socket
import subprocess
import sys
import time

import pytest

from awcp.transport.workspace import build_manifest

from conftest import write_tree

FILES = {"notes.txt": b"draft\n", "src/app.py": b"x = 1\n"}
EDIT = "sh -c 'echo final > notes.txt; echo AWCP_SUMMARY: polished'"


def awcp(*args, env=None, timeout=60, check=None):
    proc = subprocess.run(
        [sys.executable, "-m", "awcp", *args], capture_output=True, text=True, timeout=timeout, env={**os.environ, **(env or {})}
    )
    if check is not None:
        assert proc.returncode == check, proc.stdout + proc.stderr
    return proc


class Server:
    def __init__(self, base, backend_command, *extra):
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "awcp", "serve", "--port", "0", "--state-dir", str(base / "exec"), "--backend-command", backend_command, *extra],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
        line = self.proc.stdout.readline()
        assert line.startswith("listening on "), line + self.proc.stderr.read()
        self.url = line.split()[-1]

    def stop(self):
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                self.proc.wait(10)
            except subprocess.TimeoutExpired:
                self.proc.kill()
        self.proc.stdout.close()
        self.proc.stderr.close()


@pytest.fixture
def serve(tmp_path):
    servers = []

    def start(backend_command=EDIT, *extra):
        s = Server(tmp_path, backend_command, *extra)
        servers.append(s)
        return s

    yield start
    for s in servers:
        s.stop()


@pytest.fixture
def ws(tmp_path):
    return write_tree(str(tmp_path / "ws"), FILES)


def state(tmp_path):
    return ["--state-dir", str(tmp_path / "state")]


def test_archive_delegation_updates_workspace(serve, ws, tmp_path):
    server = serve()
    out = awcp("delegate", *state(tmp_path), "--workspace", ws, "--task", "polish", "--executor", server.url, "--watch", check=0)
    did = out.stdout.splitlines()[0]
    assert f"[{did}] 1 status" in out.stdout and " done " in out.stdout and "polished" in out.stdout
    assert open(os.path.join(ws, "notes.txt")).read() == "final\n"
    status = json.loads(awcp("status", did, "--json", *state(tmp_path), check=0).stdout)
    assert status["state"] == "completed"
    assert [h["event"] for h in status["history"]][-1] == "RECV_DONE"
    listing = awcp("status", *state(tmp_path), check=0).stdout
    assert did in listing and "completed" in listing


def test_decline_exit_code(serve, ws, tmp_path):
    server = serve(EDIT, "--max-ttl", "10")
    # a live loopback projection cannot honour read-only, so the executor declines
    out = awcp("delegate", *state(tmp_path), "--workspace", ws, "--task", "t", "--executor", server.url, "--transport", "loopback", "--mode", "read-only")
    assert out.returncode == 1
    assert "DECLINED" in out.stderr


def test_read_only_discard_leaves_manifest(serve, ws, tmp_path):
    server = serve("sh -c 'cat notes.txt; echo AWCP_SUMMARY: reviewed'")
    before = build_manifest(ws)
    out = awcp(
        "delegate", *state(tmp_path), "--workspace", ws, "--task", "review", "--executor", server.url,
        "--mode", "read-only", "--policy", "discard", "--json",
    )
    assert out.returncode == 0, out.stderr
    assert json.loads(out.stdout.split("\n", 1)[1])["state"] == "completed"
    assert build_manifest(ws) == before


def test_staged_approve_and_discard(serve, ws, tmp_path):
    server = serve()
    before = build_manifest(ws)
    did = awcp("delegate", *state(tmp_path), "--workspace", ws, "--task", "t", "--executor", server.url, "--policy", "staged", check=0).stdout.split()[0]
    assert build_manifest(ws) == before
    listed = json.loads(awcp("snapshots", "list", did, "--json", *state(tmp_path), check=0).stdout)
    [snap] = listed
    assert snap["recommended"] is True
    out = awcp("snapshots", "approve", did, snap["snapshotId"], *state(tmp_path), check=0)
    assert "notes.txt" in out.stdout
    assert open(os.path.join(ws, "notes.txt")).read() == "final\n"
    assert "no pending snapshots" in awcp("snapshots", "list", did, *state(tmp_path), check=0).stdout

    ws2 = write_tree(str(tmp_path / "ws2"), FILES)
    did2 = awcp("delegate", *state(tmp_path), "--workspace", ws2, "--task", "t", "--executor", server.url, "--policy", "staged", check=0).stdout.split()[0]
    sid = json.loads(awcp("snapshots", "list", did2, "--json", *state(tmp_path)).stdout)[0]["snapshotId"]
    awcp("snapshots", "discard", did2, sid, *state(tmp_path), check=0)
    st = json.loads(awcp("status", did2, "--json", *state(tmp_path), check=0).stdout)
    assert st["pendingSnapshots"] == [] and st["state"] == "completed"
    assert open(os.path.join(ws2, "notes.txt")).read() == "draft\n"


def test_unknown_ids_fail(tmp_path):
    for args in (("status", "nope"), ("cancel", "nope"), ("snapshots", "list", "nope"), ("snapshots", "approve", "nope", "s")):
        out = awcp(*args, *state(tmp_path))
        assert out.returncode == 1, args
        assert out.stderr.startswith("error:")


def test_state_dir_from_environment(serve, ws, tmp_path):
    server = serve()
    env = {"AWCP_STATE_DIR": str(tmp_path / "envstate")}
    did = awcp("delegate", "--workspace", ws, "--task", "t", "--executor", server.url, env=env, check=0).stdout.split()[0]
    assert os.path.exists(tmp_path / "envstate" / "delegations" / f"{did}.json")
    assert did in awcp("status", env=env, check=0).stdout


def test_config_file_and_bad_config(serve, ws, tmp_path):
    server = serve()
    cfg = tmp_path / "delegator.json"
    cfg.write_text(json.dumps({"role": "delegator", "stateDir": str(tmp_path / "cfgstate"), "admission": {"allowedRoots": [str(tmp_path)]}}))
    awcp("delegate", "--config", str(cfg), "--workspace", ws, "--task", "t", "--executor", server.url, check=0)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"role": "delegator", "colour": "blue"}))
    out = awcp("status", "--config", str(bad))
    assert out.returncode == 2 and "colour" in out.stderr
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps({"role": "executor"}))
    assert awcp("delegate", "--config", str(wrong), "--workspace", ws, "--task", "t", "--executor", server.url).returncode == 2


def test_admission_denied(serve, ws, tmp_path):
    server = serve()
    cfg = tmp_path / "narrow.json"
    cfg.write_text(json.dumps({"role": "delegator", "stateDir": str(tmp_path / "s"), "admission": {"allowedRoots": ["/nonexistent"]}}))
    out = awcp("delegate", "--config", str(cfg), "--workspace", ws, "--task", "t", "--executor", server.url)
    assert out.returncode == 1 and "ADMISSION_DENIED" in out.stderr


def test_port_in_use(tmp_path):
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    sock.listen()
    try:
        out = awcp("serve", "--port", str(sock.getsockname()[1]), "--state-dir", str(tmp_path), "--backend-command", "true")
        assert out.returncode == 1 and "cannot listen" in out.stderr
    finally:
        sock.close()


def test_sigterm_reports_shutdown(serve, ws, tmp_path):
    server = serve("sleep 30")
    delegate = subprocess.Popen(
        [sys.executable, "-m", "awcp", "delegate", *state(tmp_path), "--workspace", ws, "--task", "t", "--executor", server.url],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    did = delegate.stdout.readline().strip()
    _wait_state(tmp_path, did, "running")
    server.proc.send_signal(signal.SIGTERM)
    assert server.proc.wait(15) == 0
    out, err = delegate.communicate(timeout=30)
    assert delegate.returncode == 1
    assert "SHUTDOWN" in err
    assert not os.path.exists(tmp_path / "exec" / "work" / did)


def _wait_state(tmp_path, did, want, timeout=15.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        out = awcp("status", did, "--json", *state(tmp_path))
        if out.returncode == 0 and json.loads(out.stdout)["state"] == want:
            return
        time.sleep(0.1)
    raise AssertionError(f"{did} never reached {want}")


def test_cancel_from_another_process(serve, ws, tmp_path):
    server = serve("sleep 30")
    delegate = subprocess.Popen(
        [sys.executable, "-m", "awcp", "delegate", *state(tmp_path), "--workspace", ws, "--task", "t", "--executor", server.url],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    did = delegate.stdout.readline().strip()
    _wait_state(tmp_path, did, "running")
    awcp("cancel", did, *state(tmp_path), check=0)
    delegate.communicate(timeout=30)
    assert delegate.returncode == 1
    assert json.loads(awcp("status", did, "--json", *state(tmp_path)).stdout)["state"] == "cancelled"


def test_recover_after_crash(serve, ws, tmp_path):
    gate = tmp_path / "gate"
    server = serve(f"sh -c 'while [ ! -f {gate} ]; do sleep 0.05; done; echo recovered > notes.txt'")
    delegate = subprocess.Popen(
        [sys.executable, "-m", "awcp", "delegate", *state(tmp_path), "--workspace", ws, "--task", "t", "--executor", server.url],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    did = delegate.stdout.readline().strip()
    _wait_state(tmp_path, did, "running")
    delegate.kill()
    delegate.communicate()
    gate.write_text("go")
    out = awcp("recover", *state(tmp_path), "--timeout", "30", check=0)
    assert did in out.stdout and "completed" in out.stdout
    assert open(os.path.join(ws, "notes.txt")).read() == "recovered\n"
    st = json.loads(awcp("status", did, "--json", *state(tmp_path)).stdout)
    assert len(st["appliedChanges"]) == 1


def test_fixture_and_scenario_commands(tmp_path):
    out = tmp_path / "fixture.json"
    awcp("fixture", "-o", str(out), check=0)
    data = json.loads(out.read_text())
    assert len(data["delegation"]["transitions"]) > 0
    res = awcp("scenario", "two-round-compliance", timeout=120)
    assert res.returncode == 0, res.stdout + res.stderr


def test_harness_command(tmp_path):
    report = tmp_path / "report.json"
    out = awcp("harness", "--runs", "6", "--seed", "3", "--fault-rate", "0", "--report", str(report), timeout=120, check=0)
    assert "illegalTransitions" in out.stdout
    data = json.loads(report.read_text())
    assert data["summary"]["runs"] == 6 and data["summary"]["failed"] == 0


def test_harness_failure_listing(monkeypatch, capsys):
    from awcp import cli
    from awcp.harness import runner

    bad = runner.RunResult({"index": 4, "schedule": {"faults": []}}, "run-x", ["completed", None], "error", "error", "X", {}, [], ["outcome: wrong"], 0, 0.1)
    monkeypatch.setattr(runner, "run_randomized_suite", lambda *a, **k: runner.SuiteReport(0, [bad], 0.1))
    assert cli.main(["harness", "--runs", "1"]) == 1
    assert "FAIL run 4 (run-x): outcome: wrong" in capsys.readouterr().out


def test_storage_delegation_through_blobstore_command(serve, ws, tmp_path):
    assert awcp("blobstore", "--port", "0").returncode == 2
    store = subprocess.Popen(
        [sys.executable, "-m", "awcp", "blobstore", "--port", "0", "--secret", "s3"], stdout=subprocess.PIPE, text=True
    )
    try:
        url = store.stdout.readline().split()[-1]
        server = serve()
        awcp(
            "delegate", *state(tmp_path), "--workspace", ws, "--task", "t", "--executor", server.url,
            "--transport", "storage", "--blob-store-url", url, "--blob-store-secret", "s3", check=0,
        )
        assert open(os.path.join(ws, "notes.txt")).read() == "final\n"
    finally:
        store.send_signal(signal.SIGTERM)
        assert store.wait(10) == 0
        store.stdout.close()
