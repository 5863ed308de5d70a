"""Delegator-side HTTP client for the executor's control-plane routes."""

from __future__ import annotations

import json
import logging
import threading
import time
from typing import Iterator

import httpx

from ..protocol import (
    AwcpError,
    ErrorCode,
    Message,
    MessageError,
    MessageType,
    ProtocolError,
    RemoteError,
    encode_message,
    message_from_dict,
)
from .http import make_client
from .sse import SseEvent, SseParser

logger = logging.getLogger(__name__)

INVITE_PATH = "/awcp/v1/invite"
START_PATH = "/awcp/v1/start"
ERROR_PATH = "/awcp/v1/error"
ACK_PATH = "/awcp/v1/delegations/{id}/ack"
SNAPSHOT_PATH = "/awcp/v1/delegations/{id}/snapshots/{sid}"
EVENTS_PATH = "/tasks/{id}/events"

ACK_ATTEMPTS = 3


class WireError(AwcpError):
    default_code = ErrorCode.CONNECTION_LOST


def _error_from_response(resp: httpx.Response) -> RemoteError:
    try:
        body = resp.json()
    except ValueError:
        return RemoteError(f"HTTP {resp.status_code}: {resp.text[:200]}", ErrorCode.TRANSPORT_FAILED)
    try:
        if "type" in body:
            msg = message_from_dict(body)
            if isinstance(msg.payload, ProtocolError):
                return RemoteError.from_protocol_error(msg.payload)
        return RemoteError.from_protocol_error(ProtocolError.from_dict(body))
    except (MessageError, TypeError):
        return RemoteError(f"HTTP {resp.status_code}: unparseable error body", ErrorCode.TRANSPORT_FAILED)


class ExecutorClient:
    """Thin wrapper over the executor routes. Thread-safe (httpx clients are)."""

    def __init__(
        self,
        endpoint: str,
        token: str | None = None,
        transport: httpx.BaseTransport | None = None,
        timeout: float = 30.0,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.http = make_client(transport, token, timeout)

    def close(self) -> None:
        self.http.close()

    def _url(self, path: str) -> str:
        return self.endpoint + path

    def _post(self, path: str, body: bytes) -> httpx.Response:
        try:
            return self.http.post(self._url(path), content=body, headers={"Content-Type": "application/json"})
        except httpx.HTTPError as exc:
            raise WireError(f"POST {path} failed: {exc}") from None

    def invite(self, msg: Message) -> Message:
        """Returns the ACCEPT; raises RemoteError when the executor answers ERROR."""
        resp = self._post(INVITE_PATH, encode_message(msg))
        if resp.status_code != 200:
            raise _error_from_response(resp)
        reply = message_from_dict(resp.json())
        if reply.type is MessageType.ERROR:
            raise RemoteError.from_protocol_error(reply.payload)
        if reply.type is not MessageType.ACCEPT or reply.delegation_id != msg.delegation_id:
            raise MessageError(f"unexpected reply to INVITE: {reply.type.value}")
        return reply

    def start(self, msg: Message) -> dict:
        resp = self._post(START_PATH, encode_message(msg))
        if resp.status_code != 200:
            raise _error_from_response(resp)
        body = resp.json()
        if body.get("type") == MessageType.ERROR.value:
            raise _error_from_response(resp)
        if body.get("ok") is not True:
            raise MessageError(f"unexpected reply to START: {body!r}")
        return body

    def ack(self, delegation_id: str) -> None:
        """Idempotent, so retried with exponential backoff."""
        delay = 0.05
        for attempt in range(1, ACK_ATTEMPTS + 1):
            try:
                resp = self.http.post(self._url(ACK_PATH.format(id=delegation_id)))
            except httpx.HTTPError as exc:
                if attempt == ACK_ATTEMPTS:
                    raise WireError(f"ACK failed after {attempt} attempts: {exc}") from None
                time.sleep(delay)
                delay *= 2
                continue
            if resp.status_code == 204:
                return
            raise _error_from_response(resp)

    def send_error(self, msg: Message) -> None:
        resp = self._post(ERROR_PATH, encode_message(msg))
        if resp.status_code not in (200, 204):
            raise _error_from_response(resp)

    def fetch_snapshot(self, delegation_id: str, snapshot_id: str) -> dict:
        try:
            resp = self.http.get(self._url(SNAPSHOT_PATH.format(id=delegation_id, sid=snapshot_id)))
        except httpx.HTTPError as exc:
            raise WireError(f"snapshot fetch failed: {exc}") from None
        if resp.status_code != 200:
            raise _error_from_response(resp)
        return resp.json()

    def subscribe(self, delegation_id: str, last_seen_id: int | None = None, **kw) -> "EventSubscription":
        return EventSubscription(self, delegation_id, last_seen_id, **kw)


def post_message(endpoint: str, msg: Message | None = None, *, ack_for: str | None = None, client: ExecutorClient | None = None):
    """Send one control message and return the typed response.

    INVITE returns the ACCEPT message, START returns ``{"ok": True}``, an ACK
    (``ack_for=<delegationId>``) and ERROR return None. A peer ERROR reply is
    raised as :class:`RemoteError`.
    """
    own = client is None
    client = client or ExecutorClient(endpoint)
    try:
        if ack_for is not None:
            return client.ack(ack_for)
        if msg is None:
            raise ValueError("nothing to send")
        if msg.type is MessageType.INVITE:
            return client.invite(msg)
        if msg.type is MessageType.START:
            return client.start(msg)
        if msg.type is MessageType.ERROR:
            return client.send_error(msg)
        raise ValueError(f"{msg.type.value} is not sent by the delegator")
    finally:
        if own:
            client.close()


class EventSubscription:
    """Iterates a delegation's SSE stream, reconnecting with Last-Event-ID.

    Events are yielded in id order with duplicates dropped. Iteration ends
    after a terminal event (done/error). ``max_retries`` consecutive failed
    connections without progress raise :class:`WireError`.
    """

    def __init__(
        self,
        client: ExecutorClient,
        delegation_id: str,
        last_seen_id: int | None = None,
        max_retries: int = 5,
        backoff: float = 0.05,
        max_backoff: float = 2.0,
    ):
        self.client = client
        self.delegation_id = delegation_id
        self.last_id = last_seen_id or 0
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.connects = 0
        self._stop = threading.Event()
        self._resp: httpx.Response | None = None
        self._lock = threading.Lock()

    def close(self) -> None:
        self._stop.set()
        with self._lock:
            resp = self._resp
        if resp is not None:
            try:
                resp.close()
            except Exception:  # closing from another thread may race the reader
                pass

    @property
    def closed(self) -> bool:
        return self._stop.is_set()

    def _resolve(self, ev: SseEvent) -> SseEvent:
        ref = ev.data.get("dataRef") if ev.event_name == "snapshot" else None
        if not ref:
            return ev
        full = self.client.fetch_snapshot(self.delegation_id, ev.data["snapshotId"])
        return SseEvent(ev.event_name, ev.id, full)

    def __iter__(self) -> Iterator[SseEvent]:
        failures = 0
        url = self.client._url(EVENTS_PATH.format(id=self.delegation_id))
        while not self._stop.is_set():
            headers = {"Accept": "text/event-stream"}
            if self.last_id:
                headers["Last-Event-ID"] = str(self.last_id)
            progressed = False
            try:
                self.connects += 1
                with self.client.http.stream("GET", url, headers=headers, timeout=httpx.Timeout(30.0, read=None)) as resp:
                    with self._lock:
                        self._resp = resp
                    if resp.status_code != 200:
                        resp.read()
                        err = _error_from_response(resp)
                        if resp.status_code in (400, 401, 404):
                            raise err
                        raise WireError(str(err))
                    parser = SseParser()
                    for chunk in resp.iter_raw():
                        for ev in parser.feed(chunk):
                            if ev.id <= self.last_id:
                                continue
                            ev = self._resolve(ev)
                            self.last_id = ev.id
                            progressed = True
                            yield ev
                            if ev.terminal:
                                return
            except (httpx.HTTPError, WireError, json.JSONDecodeError) as exc:
                if self._stop.is_set():
                    return
                logger.debug("event stream for %s dropped: %s", self.delegation_id, exc)
            finally:
                with self._lock:
                    self._resp = None
            if self._stop.is_set():
                return
            failures = 0 if progressed else failures + 1
            if failures > self.max_retries:
                raise WireError(f"event stream for {self.delegation_id} lost after {self.max_retries} retries")
            if failures:
                self._stop.wait(min(self.backoff * 2 ** (failures - 1), self.max_backoff))


def subscribe_events(endpoint: str, delegation_id: str, last_seen_id: int | None = None, **kw) -> EventSubscription:
    return ExecutorClient(endpoint).subscribe(delegation_id, last_seen_id, **kw)
