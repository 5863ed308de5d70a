"""Pluggable executor backends: the thing that actually works on the delegated files."""

from __future__ import annotations

import abc
import logging
import os
import shlex
import signal
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Callable

import httpx

from .protocol import TaskSpec
from .wire.http import make_client

logger = logging.getLogger(__name__)

SUMMARY_PREFIX = "AWCP_SUMMARY:"
HIGHLIGHT_PREFIX = "AWCP_HIGHLIGHT:"
TERM_GRACE = 1.0


@dataclass
class BackendOutcome:
    success: bool
    summary: str = ""
    highlights: list[str] = field(default_factory=list)
    progress_events: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.success and not self.summary:
            self.summary = "task completed"


@dataclass
class BackendContext:
    delegation_id: str
    work_dir: str
    task: TaskSpec
    lease_mode: str
    deadline: str
    emit: Callable[[str], None] = lambda line: None
    cancelled: threading.Event = field(default_factory=threading.Event)
    pid: int | None = None

    def env(self) -> dict[str, str]:
        return {
            "AWCP_WORKDIR": self.work_dir,
            "AWCP_TASK_DESCRIPTION": self.task.description,
            "AWCP_PROMPT": self.task.agent_prompt,
            "AWCP_LEASE_MODE": self.lease_mode,
            "AWCP_DEADLINE": self.deadline,
        }


class Backend(abc.ABC):
    @abc.abstractmethod
    def run(self, ctx: BackendContext) -> BackendOutcome:
        """Block until the task finishes or ``ctx.cancelled`` is set."""


class CommandBackend(Backend):
    """Runs an executable inside the work dir; every output line is a progress event.

    Lines starting with ``AWCP_SUMMARY:`` set the final summary and
    ``AWCP_HIGHLIGHT:`` lines collect highlights. Exit status 0 means success.
    On failure the trailing output becomes the error message.
    """

    def __init__(self, command: str | list[str], extra_env: dict[str, str] | None = None, poll: float = 0.02):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise ValueError("empty backend command")
        self.extra_env = extra_env or {}
        self.poll = poll

    def run(self, ctx):
        env = {**os.environ, **self.extra_env, **ctx.env()}
        proc = subprocess.Popen(
            self.argv,
            cwd=ctx.work_dir,
            env=env,
            stdin=subprocess.DEVNULL,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
            start_new_session=True,
        )
        ctx.pid = proc.pid
        lines: list[str] = []
        reader = threading.Thread(target=self._pump, args=(proc, ctx, lines), daemon=True)
        reader.start()
        while True:
            try:
                proc.wait(timeout=self.poll)
                break
            except subprocess.TimeoutExpired:
                if ctx.cancelled.is_set():
                    self._kill(proc)
                    break
        reader.join(timeout=2.0)
        if ctx.cancelled.is_set():
            return BackendOutcome(False, "backend terminated", progress_events=lines)
        return self._outcome(proc.returncode, lines)

    @staticmethod
    def _pump(proc, ctx, lines):
        for raw in proc.stdout:
            line = raw.rstrip("\n")
            lines.append(line)
            if line and not line.startswith((SUMMARY_PREFIX, HIGHLIGHT_PREFIX)):
                ctx.emit(line)

    @staticmethod
    def _kill(proc: subprocess.Popen) -> None:
        for sig, grace in ((signal.SIGTERM, TERM_GRACE), (signal.SIGKILL, 5.0)):
            try:
                os.killpg(proc.pid, sig)
            except ProcessLookupError:
                pass
            try:
                proc.wait(timeout=grace)
                return
            except subprocess.TimeoutExpired:
                continue

    @staticmethod
    def _outcome(returncode: int, lines: list[str]) -> BackendOutcome:
        summary = ""
        highlights = []
        plain = []
        for line in lines:
            if line.startswith(SUMMARY_PREFIX):
                summary = line[len(SUMMARY_PREFIX):].strip()
            elif line.startswith(HIGHLIGHT_PREFIX):
                highlights.append(line[len(HIGHLIGHT_PREFIX):].strip())
            elif line.strip():
                plain.append(line.strip())
        if returncode == 0:
            return BackendOutcome(True, summary or (plain[-1] if plain else ""), highlights, plain)
        message = summary or "\n".join(plain[-5:]) or f"backend exited with status {returncode}"
        return BackendOutcome(False, message, highlights, plain)


class HttpCallbackBackend(Backend):
    """POSTs the task to a URL; the JSON response is the outcome.

    Expected response: ``{"success": bool, "summary": str, "highlights": [...],
    "progress": [...]}``. Non-2xx replies count as failures.
    """

    def __init__(self, url: str, timeout: float = 600.0, token: str | None = None):
        self.url = url
        self.timeout = timeout
        self.token = token

    def run(self, ctx):
        body = {
            "delegationId": ctx.delegation_id,
            "workDir": ctx.work_dir,
            "task": ctx.task.to_dict(),
            "leaseMode": ctx.lease_mode,
            "deadline": ctx.deadline,
        }
        result: dict = {}

        def call():
            try:
                with make_client(token=self.token, timeout=self.timeout) as client:
                    resp = client.post(self.url, json=body)
                result["resp"] = resp
            except httpx.HTTPError as exc:
                result["exc"] = exc

        worker = threading.Thread(target=call, daemon=True)
        worker.start()
        while worker.is_alive():
            worker.join(timeout=0.05)
            if ctx.cancelled.is_set():
                return BackendOutcome(False, "backend terminated")
        if "exc" in result:
            return BackendOutcome(False, f"callback failed: {result['exc']}")
        resp = result["resp"]
        try:
            data = resp.json()
        except ValueError:
            data = {}
        for line in data.get("progress") or []:
            ctx.emit(str(line))
        ok = resp.is_success and bool(data.get("success"))
        summary = str(data.get("summary") or ("" if ok else f"callback returned HTTP {resp.status_code}"))
        return BackendOutcome(ok, summary, [str(h) for h in data.get("highlights") or []], list(data.get("progress") or []))


class CallableBackend(Backend):
    """Wraps a Python function ``fn(ctx) -> BackendOutcome | None``; handy for tests."""

    def __init__(self, fn: Callable[[BackendContext], BackendOutcome | None]):
        self.fn = fn

    def run(self, ctx):
        try:
            out = self.fn(ctx)
        except Exception as exc:
            logger.debug("callable backend raised", exc_info=True)
            return BackendOutcome(False, str(exc) or type(exc).__name__)
        return out if out is not None else BackendOutcome(True, "task completed")
