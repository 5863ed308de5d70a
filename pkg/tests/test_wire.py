from __future__ import annotations

import json
import threading
import time

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from awcp.harness.faults import FaultInjectingTransport
from awcp.protocol import (
    AcceptPayload,
    AwcpError,
    EnvironmentDeclaration,
    ErrorCode,
    InvitePayload,
    LeaseConfig,
    Message,
    MessageType,
    RemoteError,
    TaskSpec,
    encode_message,
)
from awcp.wire.client import ExecutorClient, post_message
from awcp.wire.http import make_client, shared_transport
from awcp.wire.server import ExecutorServer, UnknownDelegation
from awcp.wire.sse import INLINE_REPLAY_LIMIT, REPLAY_CAP, EventLog, SseEvent, SseParser, replay_form, sse_encode_event


class StubService:
    """Minimal route handler: known ids get an EventLog; INVITE always accepted."""

    def __init__(self):
        self.logs: dict[str, EventLog] = {}
        self.acks: dict[str, int] = {}
        self.errors: list[Message] = []

    def handle_invite(self, msg):
        if msg.payload.transport == "nope":
            return Message.error(msg.delegation_id, ErrorCode.DECLINED, "transport not offered")
        self.logs.setdefault(msg.delegation_id, EventLog())
        return Message.build(MessageType.ACCEPT, msg.delegation_id, AcceptPayload("/w/" + msg.delegation_id))

    def handle_start(self, msg):
        self.event_log(msg.delegation_id)
        return None

    def handle_ack(self, did):
        self.event_log(did)
        self.acks[did] = self.acks.get(did, 0) + 1

    def handle_error(self, msg):
        self.errors.append(msg)

    def event_log(self, did):
        try:
            return self.logs[did]
        except KeyError:
            raise UnknownDelegation(f"unknown delegation {did}") from None


@pytest.fixture
def stub():
    svc = StubService()
    server = ExecutorServer(svc, heartbeat=0.5).start()
    yield svc, server
    server.stop()


def invite(did="d1", transport="archive"):
    return Message.build(
        MessageType.INVITE, did, InvitePayload(TaskSpec("t"), LeaseConfig(60), EnvironmentDeclaration(), transport)
    )


# ---------------------------------------------------------------------------
# framing


def test_sse_frame_bit_exact():
    assert sse_encode_event(SseEvent("status", 1, {"state": "running"})) == b'id: 1\nevent: status\ndata: {"state":"running"}\n\n'
    snap = sse_encode_event(SseEvent("snapshot", 2, {"snapshotId": "s", "data": "QQ==", "recommended": True}))
    assert snap == b'id: 2\nevent: snapshot\ndata: {"data":"QQ==","recommended":true,"snapshotId":"s"}\n\n'
    done = sse_encode_event(SseEvent("done", 3, {"finalSummary": "ok"}))
    assert done == b'id: 3\nevent: done\ndata: {"finalSummary":"ok"}\n\n'
    with pytest.raises(ValueError):
        sse_encode_event(SseEvent("bogus", 1, {}))


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.text(max_size=20),
    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.text(max_size=8), inner, max_size=3),
    max_leaves=10,
)
events = st.lists(
    st.builds(lambda n, d: (n, d), st.sampled_from(["status", "snapshot", "done", "error"]), st.dictionaries(st.text(max_size=8), json_values, max_size=4)),
    max_size=8,
)


@settings(max_examples=200, deadline=None)
@given(events, st.lists(st.integers(1, 50), min_size=1, max_size=20))
def test_parser_reassembles_any_chunking(evs, cuts):
    frames = [SseEvent(n, i + 1, d) for i, (n, d) in enumerate(evs)]
    stream = b"".join(sse_encode_event(e) for e in frames)
    parser = SseParser()
    out, pos, k = [], 0, 0
    while pos < len(stream):
        step = cuts[k % len(cuts)]
        out += parser.feed(stream[pos : pos + step])
        pos += step
        k += 1
    assert out == frames


def test_parser_ignores_comments_and_partial_frames():
    p = SseParser()
    assert p.feed(b": keepalive\n\nid: 1\nevent: status\ndata: {}") == []
    assert p.feed(b"\n\n") == [SseEvent("status", 1, {})]


def test_event_log_cap_drops_status_first():
    log = EventLog()
    log.append("snapshot", {"snapshotId": "s0"})
    for i in range(REPLAY_CAP + 50):
        log.append("status", {"i": i})
    evs = log.events
    assert len(evs) == REPLAY_CAP
    assert evs[0].event_name == "snapshot"
    ids = [e.id for e in evs]
    assert ids == sorted(ids) and len(set(ids)) == len(ids)
    assert evs[-1].data == {"i": REPLAY_CAP + 49}


def test_large_snapshot_replayed_by_reference():
    ev = SseEvent("snapshot", 4, {"snapshotId": "big", "data": "A" * (INLINE_REPLAY_LIMIT + 4), "sha256": "x"})
    slim = replay_form(ev, "d1")
    assert "data" not in slim.data
    assert slim.data["dataRef"] == "/awcp/v1/delegations/d1/snapshots/big"
    small = SseEvent("snapshot", 5, {"snapshotId": "s", "data": "AA=="})
    assert replay_form(small, "d1") is small


# ---------------------------------------------------------------------------
# routes


def test_invite_accept_and_decline(stub):
    svc, server = stub
    reply = post_message(server.url, invite())
    assert reply.type is MessageType.ACCEPT and reply.payload.work_dir == "/w/d1"
    with pytest.raises(RemoteError) as info:
        post_message(server.url, invite("d2", "nope"))
    assert info.value.code is ErrorCode.DECLINED


def _raw_post(url, path, body: bytes, headers=None):
    with make_client() as c:
        return c.post(url + path, content=body, headers=headers or {})


def test_status_mapping(stub):
    svc, server = stub
    r = _raw_post(server.url, "/awcp/v1/invite", b"{not json")
    assert r.status_code == 400 and r.json()["code"] == "MALFORMED_MESSAGE"
    r = _raw_post(server.url, "/awcp/v1/invite", b'{"protocolVersion":"1.0","type":"PING","delegationId":"x"}')
    assert r.status_code == 400 and r.json()["code"] == "UNKNOWN_TYPE"
    r = _raw_post(server.url, "/awcp/v1/invite", b'{"protocolVersion":"9.0","type":"INVITE","delegationId":"x"}')
    assert r.status_code == 400 and r.json()["code"] == "UNSUPPORTED_VERSION"
    start = json.loads(encode_message(invite("ghost")))
    start_body = {
        "protocolVersion": "1.0",
        "type": "START",
        "delegationId": "ghost",
        "lease": {"expiresAt": "2099-01-01T00:00:00Z", "mode": "read-write"},
        "transport": {"kind": "loopback", "path": "/x"},
    }
    assert start["type"] == "INVITE"
    r = _raw_post(server.url, "/awcp/v1/start", json.dumps(start_body).encode())
    assert r.status_code == 404 and r.json()["code"] == "UNKNOWN_DELEGATION"
    with make_client() as c:
        assert c.get(server.url + "/nowhere").status_code == 404


def test_ack_is_idempotent_204(stub):
    svc, server = stub
    post_message(server.url, invite("a1"))
    with make_client() as c:
        for _ in range(2):
            assert c.post(server.url + "/awcp/v1/delegations/a1/ack").status_code == 204
    assert svc.acks["a1"] == 2
    post_message(server.url, ack_for="a1")
    assert svc.acks["a1"] == 3


def test_bearer_token(tmp_path):
    svc = StubService()
    with ExecutorServer(svc, token="s3cret") as server:
        with pytest.raises(RemoteError) as info:
            ExecutorClient(server.url).invite(invite())
        assert info.value.code is ErrorCode.UNAUTHORIZED
        assert ExecutorClient(server.url, token="s3cret").invite(invite()).type is MessageType.ACCEPT
        with make_client() as c:
            assert c.post(server.url + "/awcp/v1/invite", content=encode_message(invite("z"))).status_code == 401


def test_start_over_dead_endpoint_not_retried():
    calls = []

    class Dead(httpx.BaseTransport):
        def handle_request(self, request):
            calls.append(request.url.path)
            raise httpx.ConnectError("refused", request=request)

    client = ExecutorClient("http://127.0.0.1:9", transport=Dead())
    with pytest.raises(AwcpError) as info:
        client.start(Message.error("d", "CANCELLED", "x"))
    assert info.value.code is ErrorCode.CONNECTION_LOST
    assert calls == ["/awcp/v1/start"]
    with pytest.raises(AwcpError):
        client.ack("d")
    assert calls.count("/awcp/v1/delegations/d/ack") == 3


def test_completed_stream_replays_then_closes(stub):
    svc, server = stub
    log = svc.logs["done1"] = EventLog()
    log.append("status", {"state": "running"})
    log.append("done", {"finalSummary": "ok"})
    got = list(ExecutorClient(server.url).subscribe("done1"))
    assert [(e.id, e.event_name) for e in got] == [(1, "status"), (2, "done")]
    # reconnect from id 1: only the tail
    got = list(ExecutorClient(server.url).subscribe("done1", 1))
    assert [e.id for e in got] == [2]


def test_subscribe_unknown_delegation(stub):
    svc, server = stub
    with pytest.raises(AwcpError) as info:
        list(ExecutorClient(server.url).subscribe("missing"))
    assert info.value.code is ErrorCode.UNKNOWN_DELEGATION


def test_large_snapshot_refetched_on_replay(stub):
    svc, server = stub
    log = svc.logs["big"] = EventLog()
    big = {"snapshotId": "s1", "data": "B" * (INLINE_REPLAY_LIMIT + 10), "sha256": "0" * 64, "recommended": True}
    log.append("status", {"state": "running"})
    log.append("snapshot", big)
    log.append("done", {"finalSummary": "ok"})
    got = list(ExecutorClient(server.url).subscribe("big", 1))
    assert got[0].data == big


def test_reconnection_across_100_forced_disconnects(stub):
    """Cut the stream after every frame while events keep arriving; ids must be gapless and unique."""
    svc, server = stub
    log = svc.logs["churn"] = EventLog()
    total = 200
    assert total <= REPLAY_CAP

    def produce():
        for i in range(total - 1):
            log.append("status", {"i": i})
            if i % 10 == 0:
                time.sleep(0.005)
        log.append("done", {"finalSummary": "ok"})

    proxy = FaultInjectingTransport(shared_transport(), disconnect_every=1)
    client = ExecutorClient(server.url, transport=proxy)
    producer = threading.Thread(target=produce)
    producer.start()
    sub = client.subscribe("churn", max_retries=50, backoff=0.001)
    ids = [e.id for e in sub]
    producer.join()
    assert proxy.disconnects >= 100
    assert ids == list(range(1, total + 1))


def test_keepalive_does_not_break_stream(stub):
    svc, server = stub
    log = svc.logs["slow"] = EventLog()

    def later():
        time.sleep(1.2)
        log.append("done", {"finalSummary": "late"})

    threading.Thread(target=later).start()
    got = list(ExecutorClient(server.url).subscribe("slow"))
    assert [e.event_name for e in got] == ["done"]
