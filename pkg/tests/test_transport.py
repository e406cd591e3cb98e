"""Full-duplex message layer over real sockets."""

import threading
import time

import pytest

from geonimbus import wire
from geonimbus.transport import (
    ConnectionClosed,
    MessageServer,
    RemoteError,
    RequestTimeout,
    connect,
)
from geonimbus.errors import GeoNimbusError
from geonimbus.remote import chunk_count


class Refused(GeoNimbusError):
    pass


def echo_handler(conn, message):
    if message.kind == "DataAvailable":
        return message.reply_ack({"echo": message.body})
    if message.kind == "DeployStage":
        raise Refused("not today")
    if message.kind == "MetricsReport":
        return None  # fire-and-forget stream
    if message.kind == "ScaleCommand":
        time.sleep(float(message.body.get("sleep", 0)))
        return message.reply_ack({"slept": True})
    return message.reply_ack({})


@pytest.fixture
def server():
    srv = MessageServer("127.0.0.1", 0, echo_handler)
    yield srv
    srv.close()


@pytest.fixture
def client(server):
    conn = connect(f"127.0.0.1:{server.port}")
    yield conn
    conn.close()


def test_request_reply(client):
    reply = client.call("DataAvailable", {"name": "x", "data": b"\x01\x02"})
    assert reply.kind == "Ack"
    assert reply.body["echo"] == {"name": "x", "data": b"\x01\x02"}


def test_error_reply_carries_code(client):
    with pytest.raises(RemoteError) as err:
        client.call("DeployStage", {"stage": "s"})
    assert err.value.code == "Refused"
    assert "not today" in err.value.detail


def test_handler_crash_becomes_internal_error(server):
    def bad_handler(conn, message):
        raise RuntimeError("oops")

    srv = MessageServer("127.0.0.1", 0, bad_handler)
    try:
        conn = connect(f"127.0.0.1:{srv.port}")
        with pytest.raises(RemoteError) as err:
            conn.call("Ack" if False else "DataAvailable", {})
        assert err.value.code == "InternalError"
        conn.close()
    finally:
        srv.close()


def test_concurrent_requests_resolve_by_correlation_id(client):
    results = {}
    errors = []

    def one(i):
        try:
            reply = client.call("DataAvailable", {"i": i})
            results[i] = reply.body["echo"]["i"]
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=one, args=(i,)) for i in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert results == {i: i for i in range(16)}


def test_slow_request_does_not_block_fast_one(client):
    # requests multiplex: a sleeping handler must not serialize the link
    slow = threading.Thread(target=lambda: client.call("ScaleCommand", {"sleep": 0.8}))
    slow.start()
    t0 = time.time()
    client.call("DataAvailable", {"quick": True})
    fast_elapsed = time.time() - t0
    slow.join()
    assert fast_elapsed < 0.5


def test_timeout(client):
    with pytest.raises(RequestTimeout):
        client.call("ScaleCommand", {"sleep": 2.0}, timeout=0.2)


def test_fire_and_forget_send(client):
    client.send(wire.Message("MetricsReport", "m1", {"window": 1}))
    # the stream keeps working afterwards
    assert client.call("DataAvailable", {"after": 1}).body["echo"] == {"after": 1}


def test_closed_connection_raises(server):
    conn = connect(f"127.0.0.1:{server.port}")
    conn.close()
    with pytest.raises(ConnectionClosed):
        conn.send(wire.Message("DataAvailable", "x", {}))


def test_server_close_fails_pending_requests(server):
    conn = connect(f"127.0.0.1:{server.port}")
    holder = {}

    def waiting():
        try:
            conn.call("ScaleCommand", {"sleep": 5.0}, timeout=10.0)
        except GeoNimbusError as exc:
            holder["error"] = exc

    t = threading.Thread(target=waiting)
    t.start()
    time.sleep(0.2)
    server.close()
    t.join(timeout=5.0)
    assert not t.is_alive()
    assert isinstance(holder.get("error"), (ConnectionClosed, RequestTimeout))


def test_protocol_violation_drops_peer(server):
    import socket as socket_mod

    raw = socket_mod.create_connection(("127.0.0.1", server.port))
    # a frame announcing more than the 64 MiB cap is a violation
    raw.sendall((wire.MAX_MESSAGE_BYTES + 1).to_bytes(4, "big") + b"x")
    deadline = time.time() + 5.0
    dropped = b"?"
    while time.time() < deadline:
        raw.settimeout(deadline - time.time())
        try:
            dropped = raw.recv(1)
            break
        except TimeoutError:
            break
    raw.close()
    assert dropped == b""  # server hung up


def test_large_payload_needs_three_chunks():
    # 10 MiB of payload over 4 MiB chunks
    assert chunk_count(10 * 1024 * 1024) == 3
    assert chunk_count(0) == 1  # empty payload still sends one frame
    assert chunk_count(wire.CHUNK_BYTES) == 1
    assert chunk_count(wire.CHUNK_BYTES + 1) == 2


def test_port_zero_allocates(server):
    assert server.port != 0
