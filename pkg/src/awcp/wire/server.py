"""Executor-side HTTP listener: control routes plus the SSE event stream."""

from __future__ import annotations

import hmac
import logging
import re
import threading
import time
from http.server import BaseHTTPRequestHandler
from typing import Protocol

from ..protocol import (
    AwcpError,
    ErrorCode,
    Message,
    MessageError,
    MessageType,
    ProtocolError,
    canonical_json,
    decode_message,
    encode_message,
)
from .http import QuietHTTPServer
from .sse import EventLog, replay_form, sse_encode_event

logger = logging.getLogger(__name__)

_ACK_RE = re.compile(r"^/awcp/v1/delegations/([^/]+)/ack$")
_SNAPSHOT_RE = re.compile(r"^/awcp/v1/delegations/([^/]+)/snapshots/([^/]+)$")
_EVENTS_RE = re.compile(r"^/tasks/([^/]+)/events$")

MAX_BODY = 512 * 1024 * 1024

_STATUS_FOR_CODE = {
    ErrorCode.UNKNOWN_DELEGATION: 404,
    ErrorCode.MALFORMED_MESSAGE: 400,
    ErrorCode.UNKNOWN_TYPE: 400,
    ErrorCode.UNSUPPORTED_VERSION: 400,
    ErrorCode.UNAUTHORIZED: 401,
}


def status_for(code: ErrorCode | str) -> int:
    return _STATUS_FOR_CODE.get(ErrorCode(code), 409)


class UnknownDelegation(AwcpError):
    default_code = ErrorCode.UNKNOWN_DELEGATION


class ExecutorRoutes(Protocol):
    def handle_invite(self, msg: Message) -> Message: ...
    def handle_start(self, msg: Message) -> Message | None: ...
    def handle_ack(self, delegation_id: str) -> None: ...
    def handle_error(self, msg: Message) -> None: ...
    def event_log(self, delegation_id: str) -> EventLog: ...


class ExecutorServer:
    """Serves an executor service over HTTP on a background thread."""

    def __init__(
        self,
        service: ExecutorRoutes,
        host: str = "127.0.0.1",
        port: int = 0,
        token: str | None = None,
        heartbeat: float = 10.0,
    ):
        self.service = service
        self.token = token
        self.heartbeat = heartbeat
        self.stopping = threading.Event()
        self.active_streams = 0
        self._streams_lock = threading.Lock()
        self._httpd = QuietHTTPServer((host, port), _make_handler(self))
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._httpd.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "ExecutorServer":
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, kwargs={"poll_interval": 0.02}, daemon=True, name="awcp-executor-http"
        )
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever(poll_interval=0.2)

    def stop(self, grace: float = 0.0) -> None:
        """Stop listening. With ``grace``, open event streams get that long to drain first."""
        deadline = time.monotonic() + grace
        while self.active_streams and time.monotonic() < deadline:
            time.sleep(0.02)
        self.stopping.set()
        if self._thread is not None:
            self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_executor_routes(service: ExecutorRoutes, host: str = "127.0.0.1", port: int = 0, **kw) -> ExecutorServer:
    return ExecutorServer(service, host, port, **kw).start()


def _make_handler(server: ExecutorServer):
    service = server.service

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            logger.debug("http: " + fmt, *args)

        def _send(self, status: int, body: bytes = b"", ctype: str = "application/json"):
            self.send_response(status)
            if body:
                self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            if body:
                self.wfile.write(body)

        def _send_error(self, code: ErrorCode | str, message: str, hint: str | None = None):
            err = ProtocolError(ErrorCode(code).value, message, hint)
            self._send(status_for(code), canonical_json(err.to_dict()))

        def _send_message(self, msg: Message):
            status = 200
            if msg.type is MessageType.ERROR:
                status = status_for(msg.payload.code)
            self._send(status, encode_message(msg))

        def _authorized(self) -> bool:
            if not server.token:
                return True
            got = self.headers.get("Authorization", "")
            if hmac.compare_digest(got, f"Bearer {server.token}"):
                return True
            self._send_error(ErrorCode.UNAUTHORIZED, "missing or invalid bearer token")
            return False

        def _read_body(self) -> bytes:
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                raise MessageError("request body too large")
            return self.rfile.read(length) if length else b""

        def do_POST(self):
            body = self._read_body()
            if not self._authorized():
                return
            path = self.path.split("?", 1)[0]
            try:
                if path == "/awcp/v1/invite":
                    msg = self._expect(body, MessageType.INVITE)
                    self._send_message(service.handle_invite(msg))
                elif path == "/awcp/v1/start":
                    msg = self._expect(body, MessageType.START)
                    reply = service.handle_start(msg)
                    if reply is None:
                        self._send(200, canonical_json({"ok": True}))
                    else:
                        self._send_message(reply)
                elif path == "/awcp/v1/error":
                    service.handle_error(self._expect(body, MessageType.ERROR))
                    self._send(204)
                elif m := _ACK_RE.match(path):
                    service.handle_ack(m.group(1))
                    self._send(204)
                else:
                    self._send_error(ErrorCode.UNKNOWN_DELEGATION, f"no route for POST {path}")
            except AwcpError as exc:
                self._send_error(exc.code, exc.message, exc.hint)
            except Exception as exc:  # never leak a stack trace to the peer
                logger.exception("unhandled error on POST %s", path)
                self._send(500, canonical_json({"code": ErrorCode.INVALID_STATE.value, "message": str(exc)}))

        def _expect(self, body: bytes, mtype: MessageType) -> Message:
            msg = decode_message(body)
            if msg.type is not mtype:
                raise MessageError(f"expected {mtype.value}, got {msg.type.value}")
            return msg

        def do_GET(self):
            if not self._authorized():
                return
            path = self.path.split("?", 1)[0]
            try:
                if m := _EVENTS_RE.match(path):
                    self._stream(m.group(1))
                elif m := _SNAPSHOT_RE.match(path):
                    data = service.event_log(m.group(1)).find_snapshot(m.group(2))
                    if data is None:
                        raise UnknownDelegation(f"no snapshot {m.group(2)}")
                    self._send(200, canonical_json(data))
                else:
                    self._send_error(ErrorCode.UNKNOWN_DELEGATION, f"no route for GET {path}")
            except AwcpError as exc:
                self._send_error(exc.code, exc.message, exc.hint)

        def _stream(self, delegation_id: str):
            log = service.event_log(delegation_id)
            try:
                last = int(self.headers.get("Last-Event-ID") or 0)
            except ValueError:
                last = 0
            replaying = last > 0
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Connection", "close")
            self.end_headers()
            self.close_connection = True
            idle = 0.0
            tick = 0.25
            with server._streams_lock:
                server.active_streams += 1
            try:
                while not server.stopping.is_set():
                    events, closed = log.wait_after(last, tick)
                    for ev in events:
                        out = replay_form(ev, delegation_id) if replaying else ev
                        self.wfile.write(sse_encode_event(out))
                        last = ev.id
                    if events:
                        self.wfile.flush()
                        idle = 0.0
                    replaying = False
                    if closed and not log.after(last):
                        return
                    if not events:
                        idle += tick
                        if idle >= server.heartbeat:
                            self.wfile.write(b": keepalive\n\n")
                            self.wfile.flush()
                            idle = 0.0
            except (BrokenPipeError, ConnectionResetError):
                logger.debug("subscriber for %s went away", delegation_id)
            finally:
                with server._streams_lock:
                    server.active_streams -= 1

    return Handler

