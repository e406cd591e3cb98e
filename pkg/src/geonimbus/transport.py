"""Full-duplex message transport over TCP.

Each :class:`MessageConnection` owns a reader thread that reassembles
length-prefixed frames and routes them: Ack/Error frames resolve pending
requests issued from this side; everything else is handed to the
connection's handler on a worker pool, never on the reader thread, so a
slow handler cannot stall response matching.  Writes are serialized by a
per-connection lock, so both peers may send concurrently.
"""

from __future__ import annotations

import socket
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

from . import wire
from .errors import GeoNimbusError

RECV_BYTES = 65536
DEFAULT_TIMEOUT = 30.0

Handler = Callable[["MessageConnection", wire.Message], Optional[wire.Message]]


class ConnectionClosed(GeoNimbusError):
    """Peer went away before the exchange completed."""


class RequestTimeout(GeoNimbusError):
    """No Ack/Error arrived within the deadline."""


class RemoteError(GeoNimbusError):
    """Peer answered with an Error message."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


class _Waiter:
    __slots__ = ("event", "reply")

    def __init__(self) -> None:
        self.event = threading.Event()
        self.reply: wire.Message | None = None


class MessageConnection:
    def __init__(
        self,
        sock: socket.socket,
        handler: Handler | None = None,
        *,
        name: str = "",
        on_close: Callable[["MessageConnection"], None] | None = None,
    ) -> None:
        self._sock = sock
        self._handler = handler
        self._on_close = on_close
        self.name = name or f"conn-{uuid.uuid4().hex[:8]}"
        self._write_lock = threading.Lock()
        self._pending_lock = threading.Lock()
        self._pending: dict[object, _Waiter] = {}
        self._closed = threading.Event()
        self._pool = ThreadPoolExecutor(max_workers=4, thread_name_prefix=f"{self.name}-handler")
        self._reader = threading.Thread(target=self._read_loop, name=f"{self.name}-reader", daemon=True)
        self._reader.start()

    # -- sending -------------------------------------------------------------

    def send(self, message: wire.Message) -> None:
        frame = wire.encode(message)
        with self._write_lock:
            if self._closed.is_set():
                raise ConnectionClosed(f"{self.name}: connection closed")
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                raise ConnectionClosed(f"{self.name}: send failed: {exc}") from exc

    def request(self, message: wire.Message, timeout: float = DEFAULT_TIMEOUT) -> wire.Message:
        """Send and block for the matching Ack; raise on Error or timeout."""
        waiter = _Waiter()
        with self._pending_lock:
            self._pending[message.correlation_id] = waiter
        try:
            self.send(message)
            if not waiter.event.wait(timeout):
                raise RequestTimeout(f"{self.name}: no reply to {message.kind} within {timeout}s")
        finally:
            with self._pending_lock:
                self._pending.pop(message.correlation_id, None)
        reply = waiter.reply
        if reply is None:
            raise ConnectionClosed(f"{self.name}: connection closed while awaiting {message.kind}")
        if reply.kind == "Error":
            raise RemoteError(str(reply.body.get("code", "Error")), str(reply.body.get("message", "")))
        return reply

    def call(self, kind: str, body: dict, timeout: float = DEFAULT_TIMEOUT) -> wire.Message:
        return self.request(wire.Message(kind, uuid.uuid4().hex, body), timeout)

    # -- receiving -----------------------------------------------------------

    def _read_loop(self) -> None:
        buffer = bytearray()
        drop = False
        while not drop and not self._closed.is_set():
            try:
                chunk = self._sock.recv(RECV_BYTES)
            except OSError:
                break
            if not chunk:
                break
            buffer.extend(chunk)
            while True:
                try:
                    message, consumed = wire.decode(bytes(buffer))
                except wire.IncompleteFrame:
                    break
                except wire.WireError:
                    drop = True  # protocol violation: drop the peer
                    break
                del buffer[:consumed]
                self._route(message)
        self.close()

    def _route(self, message: wire.Message) -> None:
        if message.kind in ("Ack", "Error"):
            with self._pending_lock:
                waiter = self._pending.get(message.correlation_id)
            if waiter is not None:
                waiter.reply = message
                waiter.event.set()
            return
        if self._handler is None:
            self.send(message.reply_error("UnhandledKind", f"no handler for {message.kind}"))
            return
        self._pool.submit(self._run_handler, message)

    def _run_handler(self, message: wire.Message) -> None:
        try:
            reply = self._handler(self, message)
        except GeoNimbusError as exc:
            reply = message.reply_error(type(exc).__name__, str(exc))
        except Exception as exc:  # never let a handler kill the pool silently
            reply = message.reply_error("InternalError", f"{type(exc).__name__}: {exc}")
        if reply is not None:
            try:
                self.send(reply)
            except ConnectionClosed:
                pass

    # -- lifecycle -----------------------------------------------------------

    def close(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        with self._pending_lock:
            waiters = list(self._pending.values())
            self._pending.clear()
        for waiter in waiters:
            waiter.event.set()
        self._pool.shutdown(wait=False, cancel_futures=True)
        if self._on_close is not None:
            callback, self._on_close = self._on_close, None
            callback(self)

    @property
    def closed(self) -> bool:
        return self._closed.is_set()


class MessageServer:
    """Accepts connections and attaches the given handler to each."""

    def __init__(self, host: str, port: int, handler: Handler, *, name: str = "server") -> None:
        self._handler = handler
        self.name = name
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(64)
        self.host, self.port = self._listener.getsockname()[:2]
        self._lock = threading.Lock()
        self._connections: set[MessageConnection] = set()
        self._closed = threading.Event()
        self._acceptor = threading.Thread(target=self._accept_loop, name=f"{name}-accept", daemon=True)
        self._acceptor.start()

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                sock, peer = self._listener.accept()
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = MessageConnection(
                sock,
                self._handler,
                name=f"{self.name}<-{peer[0]}:{peer[1]}",
                on_close=self._forget,
            )
            with self._lock:
                self._connections.add(conn)

    def _forget(self, conn: MessageConnection) -> None:
        with self._lock:
            self._connections.discard(conn)

    def close(self) -> None:
        self._closed.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._connections)
        for conn in conns:
            conn.close()


def connect(address: str, handler: Handler | None = None, *, timeout: float = 10.0, name: str = "") -> MessageConnection:
    """Open a client connection to ``host:port``."""
    host, _, port = address.rpartition(":")
    sock = socket.create_connection((host, int(port)), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return MessageConnection(sock, handler, name=name or f"client->{address}")
