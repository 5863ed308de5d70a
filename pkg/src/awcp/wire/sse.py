"""Server-Sent Events framing, parsing and the per-delegation replay buffer."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

from ..protocol import canonical_json

EVENT_NAMES = ("status", "snapshot", "done", "error")
TERMINAL_EVENTS = ("done", "error")
REPLAY_CAP = 256
# snapshot payloads above this are replayed by reference
INLINE_REPLAY_LIMIT = 1024 * 1024


@dataclass(frozen=True)
class SseEvent:
    event_name: str
    id: int
    data: dict

    @property
    def terminal(self) -> bool:
        return self.event_name in TERMINAL_EVENTS


def sse_encode_event(event: SseEvent) -> bytes:
    if event.event_name not in EVENT_NAMES:
        raise ValueError(f"unknown event name {event.event_name!r}")
    data = canonical_json(event.data)
    return b"id: %d\nevent: %s\ndata: %s\n\n" % (event.id, event.event_name.encode(), data)


class SseParser:
    """Incremental parser; only complete frames (terminated by a blank line) are emitted."""

    def __init__(self):
        self._buf = b""
        self._reset()

    def _reset(self):
        self._id: str | None = None
        self._event = "message"
        self._data: list[str] = []

    def feed(self, chunk: bytes) -> list[SseEvent]:
        self._buf += chunk
        out = []
        while True:
            idx = self._buf.find(b"\n")
            if idx < 0:
                break
            line = self._buf[:idx].rstrip(b"\r").decode("utf-8")
            self._buf = self._buf[idx + 1 :]
            if line == "":
                if self._data:
                    ev = self._dispatch()
                    if ev is not None:
                        out.append(ev)
                self._reset()
                continue
            if line.startswith(":"):
                continue
            field, _, value = line.partition(":")
            if value.startswith(" "):
                value = value[1:]
            if field == "id":
                self._id = value
            elif field == "event":
                self._event = value
            elif field == "data":
                self._data.append(value)
        return out

    def _dispatch(self) -> SseEvent | None:
        try:
            ev_id = int(self._id) if self._id is not None else 0
            data = json.loads("\n".join(self._data))
        except ValueError:
            return None
        return SseEvent(self._event, ev_id, data)


class EventLog:
    """Ordered, replayable event stream for one delegation.

    Ids start at 1 and strictly increase. When more than ``cap`` events are
    buffered the oldest ``status`` events are dropped first; snapshot, done
    and error events are always retained.
    """

    def __init__(self, cap: int = REPLAY_CAP):
        self.cap = cap
        self._events: list[SseEvent] = []
        self._next_id = 1
        self._cond = threading.Condition()
        self.closed = False

    def append(self, name: str, data: dict) -> SseEvent:
        with self._cond:
            if self.closed:
                raise RuntimeError("event log already closed")
            ev = SseEvent(name, self._next_id, data)
            self._next_id += 1
            self._events.append(ev)
            if len(self._events) > self.cap:
                for i, old in enumerate(self._events):
                    if old.event_name == "status":
                        del self._events[i]
                        break
            if ev.terminal:
                self.closed = True
            self._cond.notify_all()
            return ev

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def after(self, last_id: int) -> list[SseEvent]:
        with self._cond:
            return [e for e in self._events if e.id > last_id]

    def wait_after(self, last_id: int, timeout: float) -> tuple[list[SseEvent], bool]:
        with self._cond:
            pending = [e for e in self._events if e.id > last_id]
            if not pending and not self.closed:
                self._cond.wait(timeout)
                pending = [e for e in self._events if e.id > last_id]
            return pending, self.closed

    def find_snapshot(self, snapshot_id: str) -> dict | None:
        with self._cond:
            for e in self._events:
                if e.event_name == "snapshot" and e.data.get("snapshotId") == snapshot_id:
                    return e.data
        return None

    @property
    def events(self) -> list[SseEvent]:
        with self._cond:
            return list(self._events)


def replay_form(event: SseEvent, delegation_id: str) -> SseEvent:
    """Large snapshot payloads are replayed as a reference the client re-fetches."""
    if event.event_name != "snapshot":
        return event
    data = event.data.get("data") or ""
    if len(data) <= INLINE_REPLAY_LIMIT:
        return event
    sid = event.data["snapshotId"]
    slim = {k: v for k, v in event.data.items() if k != "data"}
    slim["dataRef"] = f"/awcp/v1/delegations/{delegation_id}/snapshots/{sid}"
    return SseEvent(event.event_name, event.id, slim)
