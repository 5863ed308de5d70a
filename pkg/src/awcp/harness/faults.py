"""Fault schedules and an httpx transport that injects them between delegator and executor."""

from __future__ import annotations

import base64
import json
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import httpx

DROP_START = "drop-start"
DELAY_EVENT = "delay-event"
CORRUPT_ARCHIVE_BYTE = "corrupt-archive-byte"
CRASH_DELEGATOR_AFTER = "crash-delegator-after"
EXPIRE_MID_RUN = "expire-mid-run"
DUPLICATE_DONE = "duplicate-done"
FAULT_KINDS = (DROP_START, DELAY_EVENT, CORRUPT_ARCHIVE_BYTE, CRASH_DELEGATOR_AFTER, EXPIRE_MID_RUN, DUPLICATE_DONE)
CRASH_POINTS = ("accepted", "started", "running")


@dataclass(frozen=True)
class Fault:
    kind: str
    when: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "when": self.when}


@dataclass
class FaultSchedule:
    """Faults for one run; fully determined by ``seed``."""

    seed: str
    faults: list[Fault] = field(default_factory=list)

    @classmethod
    def random(cls, seed: str, fault_rate: float = 0.5, kinds: tuple[str, ...] = FAULT_KINDS) -> "FaultSchedule":
        rng = random.Random(f"faults:{seed}")
        if not kinds or rng.random() >= fault_rate:
            return cls(seed)
        kind = rng.choice(kinds)
        when = {
            DROP_START: "START",
            DELAY_EVENT: f"event#{rng.randint(1, 3)}",
            CORRUPT_ARCHIVE_BYTE: f"byte#{rng.randint(0, 1 << 20)}",
            CRASH_DELEGATOR_AFTER: rng.choice(CRASH_POINTS),
            EXPIRE_MID_RUN: "running",
            DUPLICATE_DONE: "done",
        }[kind]
        return cls(seed, [Fault(kind, when)])

    def has(self, kind: str) -> Fault | None:
        for f in self.faults:
            if f.kind == kind:
                return f
        return None

    def to_dict(self) -> dict:
        return {"seed": self.seed, "faults": [f.to_dict() for f in self.faults]}


def flip_byte(data: bytes, index: int) -> bytes:
    if not data:
        return data
    i = index % len(data)
    return data[:i] + bytes([data[i] ^ 0xFF]) + data[i + 1:]


class _FrameStream(httpx.SyncByteStream):
    """Re-frames an SSE body so faults can act on whole events."""

    def __init__(self, inner: httpx.Response, on_frame: Callable[[bytes], list[bytes]], cut_after: int | None, on_cut=None):
        self.inner = inner
        self.on_frame = on_frame
        self.cut_after = cut_after
        self.on_cut = on_cut

    def __iter__(self):
        buf = b""
        frames = 0
        for chunk in self.inner.stream:
            buf += chunk
            while b"\n\n" in buf:
                frame, buf = buf.split(b"\n\n", 1)
                frame += b"\n\n"
                for out in self.on_frame(frame):
                    yield out
                if not frame.startswith(b":"):
                    frames += 1
                if self.cut_after is not None and frames >= self.cut_after:
                    if self.on_cut:
                        self.on_cut()
                    raise httpx.ReadError("injected disconnect")
        if buf:
            yield buf

    def close(self):
        self.inner.close()


class FaultInjectingTransport(httpx.BaseTransport):
    """Sits between the delegator's client and the executor listener.

    Besides the scheduled faults it counts requests per route, which the
    harness uses to assert at-most-once ACK.
    """

    def __init__(
        self,
        inner: httpx.BaseTransport,
        schedule: FaultSchedule | None = None,
        corrupt_storage: Callable[[], None] | None = None,
        disconnect_every: int | None = None,
        event_delay: float = 0.05,
    ):
        self.inner = inner
        self.schedule = schedule or FaultSchedule("none")
        self.corrupt_storage = corrupt_storage
        self.disconnect_every = disconnect_every
        self.event_delay = event_delay
        self.counts: dict[str, int] = {}
        self.disconnects = 0
        self._lock = threading.Lock()
        self._delayed = False

    def _count(self, key: str) -> None:
        with self._lock:
            self.counts[key] = self.counts.get(key, 0) + 1

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        path = request.url.path
        self._count("ACK" if path.endswith("/ack") else f"{request.method} {path}")
        if path == "/awcp/v1/start":
            if self.schedule.has(DROP_START):
                raise httpx.ConnectError("injected: START dropped", request=request)
            fault = self.schedule.has(CORRUPT_ARCHIVE_BYTE)
            if fault:
                request = self._corrupt(request, int(fault.when.split("#")[1]))
        if request.method == "GET" and path.startswith("/tasks/"):
            return self._stream(request)
        return self.inner.handle_request(request)

    def _corrupt(self, request: httpx.Request, index: int) -> httpx.Request:
        body = json.loads(request.read())
        handle = body.get("transport", {})
        if handle.get("kind") == "archive":
            raw = flip_byte(base64.b64decode(handle["dataBase64"]), index)
            handle["dataBase64"] = base64.b64encode(raw).decode("ascii")
        elif handle.get("kind") == "storage" and self.corrupt_storage is not None:
            self.corrupt_storage()
        content = json.dumps(body).encode()
        headers = {k: v for k, v in request.headers.items() if k.lower() != "content-length"}
        return httpx.Request(request.method, request.url, headers=headers, content=content, extensions=request.extensions)

    def _stream(self, request: httpx.Request) -> httpx.Response:
        resp = self.inner.handle_request(request)
        if resp.status_code != 200:
            return resp
        delay = self.schedule.has(DELAY_EVENT)
        dup = self.schedule.has(DUPLICATE_DONE)

        def on_frame(frame: bytes) -> list[bytes]:
            if delay and not self._delayed:
                self._delayed = True
                time.sleep(self.event_delay)
            if dup and b"\nevent: done\n" in frame:
                return [frame, frame]
            return [frame]

        def on_cut():
            with self._lock:
                self.disconnects += 1

        return httpx.Response(
            resp.status_code,
            headers=resp.headers,
            stream=_FrameStream(resp, on_frame, self.disconnect_every, on_cut),
            extensions=resp.extensions,
        )

    def close(self) -> None:
        pass
