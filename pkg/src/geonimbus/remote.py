"""Wire-protocol adapters: daemon/manager/logging servers and clients.

The in-process objects (:class:`~geonimbus.daemon.Daemon`,
:class:`~geonimbus.storage.StorageManager`) never learn about sockets;
these adapters translate between their method surfaces and the fixed
message kinds.  Where a flow has no dedicated kind, an ``action`` field
in the body disambiguates:

    DeployStage       deploy | undeploy | ping | register_store
    DataAvailable     publish (daemon->manager) | ingest (controller->daemon)
    SubscribeCatalog  subscribe | entries | pull | route | promote | select | pending
    MetricsReport     push report (no reply) | status/counters poll (Ack reply)
    ScaleCommand      resize dispatch

Payload bytes travel as TransferChunk sequences (4 MiB each, one Ack per
chunk) closed by a TransferDone carrying the item record; the receiving
daemon re-verifies the content digest before anything lands.
"""

from __future__ import annotations

import threading
import uuid
from typing import Callable, Optional

from . import transport, wire
from .autoscaler import ReplicationManager, StageMetrics
from .daemon import Daemon, LinkBinding
from .errors import GeoNimbusError
from .model import StageSpec
from .storage import (
    DataItem,
    DigestMismatch,
    Route,
    StorageManager,
    StoreInfo,
    content_id,
)


def chunk_count(size_bytes: int) -> int:
    # every payload, even an empty one, travels as at least one chunk
    return max(1, -(-size_bytes // wire.CHUNK_BYTES))


def _iter_chunks(payload: bytes):
    if not payload:
        yield 0, b""
        return
    for seq, offset in enumerate(range(0, len(payload), wire.CHUNK_BYTES)):
        yield seq, payload[offset : offset + wire.CHUNK_BYTES]


def stage_to_dict(spec: StageSpec) -> dict:
    return {
        "name": spec.name,
        "kind": spec.kind,
        "entry": spec.entry,
        "endpoint": spec.endpoint,
        "workers_initial": spec.workers_initial,
        "workers_max": spec.workers_max,
    }


def stage_from_dict(doc: dict) -> StageSpec:
    return StageSpec(
        name=doc["name"],
        kind=doc["kind"],
        entry=doc["entry"],
        endpoint=doc["endpoint"],
        workers_initial=int(doc["workers_initial"]),
        workers_max=doc["workers_max"] if doc["workers_max"] == "auto" else int(doc["workers_max"]),
    )


class _ChunkAssembler:
    """Collects TransferChunk payloads until the TransferDone arrives."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._buffers: dict[str, dict[int, bytes]] = {}

    def add(self, transfer_id: str, seq: int, data: bytes) -> None:
        with self._lock:
            self._buffers.setdefault(transfer_id, {})[int(seq)] = data

    def finish(self, transfer_id: str) -> bytes:
        with self._lock:
            parts = self._buffers.pop(transfer_id, {})
        return b"".join(parts[i] for i in sorted(parts))


def _send_payload(conn: transport.MessageConnection, payload: bytes, done_body: dict,
                  timeout: float = 120.0) -> wire.Message:
    transfer_id = uuid.uuid4().hex
    for seq, chunk in _iter_chunks(payload):
        conn.call("TransferChunk", {"transfer_id": transfer_id, "seq": seq, "data": chunk}, timeout=timeout)
    return conn.call("TransferDone", {"transfer_id": transfer_id, **done_body}, timeout=timeout)


# ---------------------------------------------------------------------------
# Daemon side
# ---------------------------------------------------------------------------


class AttachableManager:
    """Stand-in manager port for a daemon that has not met its storage
    manager yet; deployment attaches the real client."""

    def __init__(self) -> None:
        self._target = None

    def attach(self, target) -> None:
        self._target = target

    @property
    def attached(self) -> bool:
        return self._target is not None

    def _require(self):
        if self._target is None:
            raise GeoNimbusError("no storage manager attached to this daemon")
        return self._target

    def publish_catalog(self, item, source_store, *, system=""):
        return self._require().publish_catalog(item, source_store, system=system)

    def publish_and_route(self, item, source_store, *, system=""):
        return self._require().publish_and_route(item, source_store, system=system)


class RemoteManagerClient:
    """Daemon- and controller-side client for a manager server."""

    def __init__(self, address: str):
        self.address = address
        self._lock = threading.Lock()
        self._conn: Optional[transport.MessageConnection] = None

    def _connection(self) -> transport.MessageConnection:
        with self._lock:
            if self._conn is None or self._conn.closed:
                self._conn = transport.connect(self.address, name=f"manager@{self.address}")
            return self._conn

    def register_store(self, info: StoreInfo, daemon_address: str) -> None:
        self._connection().call(
            "DeployStage",
            {"action": "register_store", "info": info.to_dict(), "daemon_address": daemon_address},
        )

    def publish_catalog(self, item: DataItem, source_store: str, *, system: str = "") -> None:
        self._connection().call(
            "DataAvailable",
            {"item": item.to_dict(), "source_store": source_store, "system": system, "route": False},
        )

    def publish_and_route(self, item: DataItem, source_store: str, *, system: str = "") -> int:
        reply = self._connection().call(
            "DataAvailable",
            {"item": item.to_dict(), "source_store": source_store, "system": system, "route": True},
            timeout=300.0,
        )
        return int(reply.body.get("deliveries", 0))

    def add_route(self, route: Route) -> None:
        self._connection().call(
            "SubscribeCatalog",
            {
                "action": "route",
                "system": route.system,
                "producer_stage": route.producer_stage,
                "consumer_stage": route.consumer_stage,
                "target_store": route.target_store,
            },
        )

    def entries(self, *, system: str | None = None, producer_stage: str | None = None) -> list:
        reply = self._connection().call(
            "SubscribeCatalog",
            {"action": "entries", "system": system or "", "producer_stage": producer_stage or ""},
        )
        return [_EntryView(doc) for doc in reply.body["entries"]]

    def fetch_bytes(self, item_id: str) -> bytes:
        reply = self._connection().call("SubscribeCatalog", {"action": "pull", "item_id": item_id}, timeout=120.0)
        data = reply.body["data"]
        if content_id(data) != item_id:
            raise DigestMismatch(f"fetched bytes for {item_id} fail digest check")
        return data

    def promote_to_global(self, item_id: str) -> dict:
        reply = self._connection().call("SubscribeCatalog", {"action": "promote", "item_id": item_id}, timeout=120.0)
        return reply.body["entry"]

    def pending_transfers(self) -> int:
        reply = self._connection().call("SubscribeCatalog", {"action": "pending"})
        return int(reply.body["pending"])

    def close(self) -> None:
        with self._lock:
            if self._conn is not None:
                self._conn.close()


class _EntryView:
    """Read-only catalog entry as seen over the wire."""

    def __init__(self, doc: dict):
        self.item = DataItem.from_dict(doc["item"])
        self.source_store = doc["source_store"]
        self.state = doc["state"]
        self.subscribers = set(doc["subscribers"])
        self.system = doc.get("system", "")

    @property
    def key(self) -> str:
        return f"{self.item.id}@{self.source_store}"


class MetricsRelay:
    """Daemon metrics sink that streams reports to a logging address."""

    def __init__(self, address: str):
        self.address = address
        self._lock = threading.Lock()
        self._conn: Optional[transport.MessageConnection] = None

    def __call__(self, metrics: StageMetrics) -> None:
        try:
            with self._lock:
                if self._conn is None or self._conn.closed:
                    self._conn = transport.connect(self.address, name=f"metrics@{self.address}")
                conn = self._conn
            conn.send(wire.Message("MetricsReport", uuid.uuid4().hex, {"report": metrics.to_dict()}))
        except Exception:
            pass  # reporting is best-effort

    def close(self) -> None:
        with self._lock:
            if self._conn is not None:
                self._conn.close()


class DaemonServer:
    """Serves one daemon over the wire protocol."""

    def __init__(self, daemon: Daemon, host: str, port: int, *, advertise: str | None = None):
        self.daemon = daemon
        self._assembler = _ChunkAssembler()
        self._manager_ref = daemon.manager if isinstance(daemon.manager, AttachableManager) else None
        self.server = transport.MessageServer(host, port, self._handle, name=f"daemon-{daemon.name}")
        self.advertise = advertise or f"{host}:{self.server.port}"

    @property
    def address(self) -> str:
        return self.server.address

    def attach_manager(self, manager_address: str) -> None:
        """Connect to the storage manager and register this daemon's store."""
        if self._manager_ref is None or self._manager_ref.attached:
            return
        client = RemoteManagerClient(manager_address)
        client.register_store(self.daemon.store.info(), self.advertise)
        self._manager_ref.attach(client)

    # -- handler ---------------------------------------------------------------

    def _handle(self, conn: transport.MessageConnection, message: wire.Message) -> Optional[wire.Message]:
        body = message.body
        kind = message.kind
        if kind == "DeployStage":
            action = body.get("action", "deploy")
            if action == "ping":
                return message.reply_ack(
                    {**self.daemon.ping(), "store_id": self.daemon.store.store_id}
                )
            if action == "deploy":
                if body.get("manager_address"):
                    self.attach_manager(body["manager_address"])
                spec = stage_from_dict(body["stage_spec"])
                bindings = [
                    LinkBinding(b["to_stage"], b["channel"], b["to_endpoint"])
                    for b in body.get("bindings", [])
                ]
                self.daemon.deploy_stage(spec, bindings, system=body.get("system", ""))
                return message.reply_ack({"stage": spec.name, "state": "ready"})
            if action == "undeploy":
                self.daemon.undeploy_stage(body["stage"], force=bool(body.get("force")))
                return message.reply_ack({"stage": body["stage"], "state": "stopped"})
            return message.reply_error("MalformedPayload", f"unknown DeployStage action {action!r}")
        if kind == "ScaleCommand":
            count = self.daemon.resize_workers(body["stage"], int(body["target_workers"]))
            return message.reply_ack({"stage": body["stage"], "workers": count})
        if kind == "DataAvailable":  # controller-side ingest
            item = self.daemon.ingest(body["stage"], body.get("name", "item"), body["data"])
            return message.reply_ack({"item": item.to_dict()})
        if kind == "TransferChunk":
            self._assembler.add(body["transfer_id"], body["seq"], body["data"])
            return message.reply_ack({"seq": body["seq"]})
        if kind == "TransferDone":
            payload = self._assembler.finish(body["transfer_id"])
            info = self.daemon.deliver(
                DataItem.from_dict(body["item"]),
                payload,
                body.get("consumer_stage") or None,
                body.get("link") or None,
            )
            return message.reply_ack({"store_info": info.to_dict()})
        if kind == "SubscribeCatalog" and body.get("action") == "pull":
            return message.reply_ack({"data": self.daemon.store.pull(body["item_id"])})
        if kind == "MetricsReport":  # poll: status or counters snapshot
            query = body.get("query", "status")
            if query == "counters":
                counters = {k: list(v) for k, v in self.daemon.counters().items()}
                return message.reply_ack({"counters": counters})
            if query == "metrics":
                reports = [m.to_dict() for m in self.daemon.report_metrics()]
                return message.reply_ack({"reports": reports})
            return message.reply_ack(self.daemon.status())
        return message.reply_error("UnknownKind", f"daemon cannot serve {kind}")

    def close(self) -> None:
        self.server.close()
        self.daemon.close()


class RemoteDaemonPort:
    """Controller-side port speaking to a DaemonServer."""

    def __init__(self, address: str, *, manager_address: str | None = None):
        self.address = address
        self.manager_address = manager_address
        self._lock = threading.Lock()
        self._conn: Optional[transport.MessageConnection] = None
        self._store_id: Optional[str] = None

    def _connection(self) -> transport.MessageConnection:
        with self._lock:
            if self._conn is None or self._conn.closed:
                self._conn = transport.connect(self.address, name=f"daemon@{self.address}")
            return self._conn

    def ping(self) -> dict:
        reply = self._connection().call("DeployStage", {"action": "ping"}, timeout=10.0)
        self._store_id = reply.body.get("store_id")
        return reply.body

    def store_id(self) -> str:
        if self._store_id is None:
            self.ping()
        return self._store_id

    def deploy_stage(self, spec: StageSpec, bindings: list[LinkBinding], *, system: str = "") -> None:
        self._connection().call(
            "DeployStage",
            {
                "action": "deploy",
                "stage_spec": stage_to_dict(spec),
                "bindings": [
                    {"to_stage": b.to_stage, "channel": b.channel, "to_endpoint": b.to_endpoint}
                    for b in bindings
                ],
                "system": system,
                "manager_address": self.manager_address or "",
            },
            timeout=60.0,
        )

    def undeploy_stage(self, stage: str, *, force: bool = False) -> None:
        self._connection().call(
            "DeployStage", {"action": "undeploy", "stage": stage, "force": force}, timeout=180.0
        )

    def resize_workers(self, stage: str, count: int) -> int:
        reply = self._connection().call(
            "ScaleCommand",
            {"stage": stage, "action": "resize", "target_workers": count, "reason": "controller"},
        )
        return int(reply.body["workers"])

    def ingest(self, stage: str, name: str, data: bytes) -> str:
        reply = self._connection().call(
            "DataAvailable", {"stage": stage, "name": name, "data": data}, timeout=120.0
        )
        return reply.body["item"]["id"]

    def status(self) -> dict:
        return self._connection().call("MetricsReport", {"query": "status"}).body

    def counters(self) -> dict:
        reply = self._connection().call("MetricsReport", {"query": "counters"})
        return {k: tuple(v) for k, v in reply.body["counters"].items()}

    def pull(self, item_id: str) -> bytes:
        reply = self._connection().call("SubscribeCatalog", {"action": "pull", "item_id": item_id}, timeout=120.0)
        return reply.body["data"]

    def close(self) -> None:
        with self._lock:
            if self._conn is not None:
                self._conn.close()


# ---------------------------------------------------------------------------
# Manager side
# ---------------------------------------------------------------------------


class RemoteStoreBinding:
    """Manager-side handle on a store hosted by a remote daemon."""

    def __init__(self, info: StoreInfo, daemon_address: str):
        self._info = info
        self.daemon_address = daemon_address
        self._lock = threading.Lock()
        self._conn: Optional[transport.MessageConnection] = None

    def _connection(self) -> transport.MessageConnection:
        with self._lock:
            if self._conn is None or self._conn.closed:
                self._conn = transport.connect(self.daemon_address, name=f"store@{self.daemon_address}")
            return self._conn

    def info(self) -> StoreInfo:
        return self._info

    def fetch(self, item_id: str) -> bytes:
        reply = self._connection().call(
            "SubscribeCatalog", {"action": "pull", "item_id": item_id}, timeout=120.0
        )
        return reply.body["data"]

    def deliver(self, item: DataItem, payload: bytes, consumer_stage: str | None, link: str | None) -> StoreInfo:
        reply = _send_payload(
            self._connection(),
            payload,
            {
                "item": item.to_dict(),
                "consumer_stage": consumer_stage or "",
                "link": link or "",
            },
        )
        self._info = StoreInfo.from_dict(reply.body["store_info"])
        return self._info


class ManagerServer:
    """Serves a storage manager over the wire protocol."""

    def __init__(self, manager: StorageManager, host: str, port: int):
        self.manager = manager
        self.server = transport.MessageServer(host, port, self._handle, name="storage-manager")

    @property
    def address(self) -> str:
        return self.server.address

    def _handle(self, conn: transport.MessageConnection, message: wire.Message) -> Optional[wire.Message]:
        body = message.body
        kind = message.kind
        if kind == "DeployStage" and body.get("action") == "register_store":
            info = StoreInfo.from_dict(body["info"])
            self.manager.register_store(RemoteStoreBinding(info, body["daemon_address"]))
            return message.reply_ack({"store_id": info.store_id})
        if kind == "DataAvailable":
            item = DataItem.from_dict(body["item"])
            if body.get("route", True):
                receipts = self.manager.publish_and_route(item, body["source_store"], system=body.get("system", ""))
                return message.reply_ack({"deliveries": len(receipts)})
            self.manager.publish_catalog(item, body["source_store"], system=body.get("system", ""))
            return message.reply_ack({"deliveries": 0})
        if kind == "SubscribeCatalog":
            action = body.get("action", "entries")
            if action == "entries":
                entries = self.manager.entries(
                    system=body.get("system") or None,
                    producer_stage=body.get("producer_stage") or None,
                )
                return message.reply_ack(
                    {
                        "entries": [
                            {
                                "item": e.item.to_dict(),
                                "source_store": e.source_store,
                                "state": e.state,
                                "subscribers": sorted(e.subscribers),
                                "system": e.system,
                            }
                            for e in entries
                        ]
                    }
                )
            if action == "pull":
                return message.reply_ack({"data": self.manager.fetch_bytes(body["item_id"])})
            if action == "route":
                self.manager.add_route(
                    Route(
                        system=body["system"],
                        producer_stage=body["producer_stage"],
                        consumer_stage=body["consumer_stage"],
                        target_store=body["target_store"],
                    )
                )
                return message.reply_ack({"routes": "ok"})
            if action == "subscribe":
                entry = self.manager.entry(body["key"])
                self.manager.subscribe(
                    entry,
                    body["target_store"],
                    consumer_stage=body.get("consumer_stage") or None,
                    link=body.get("link") or None,
                )
                return message.reply_ack({"state": entry.state})
            if action == "promote":
                entry = self.manager.promote_to_global(body["item_id"])
                return message.reply_ack(
                    {"entry": {"item": entry.item.to_dict(), "source_store": entry.source_store}}
                )
            if action == "select":
                info = self.manager.select_global_store(int(body["size_bytes"]))
                return message.reply_ack({"info": info.to_dict()})
            if action == "pending":
                return message.reply_ack({"pending": self.manager.pending_transfers()})
            return message.reply_error("MalformedPayload", f"unknown SubscribeCatalog action {action!r}")
        return message.reply_error("UnknownKind", f"manager cannot serve {kind}")

    def close(self) -> None:
        self.server.close()


# ---------------------------------------------------------------------------
# Logging service
# ---------------------------------------------------------------------------


class LoggingServer:
    """Receives MetricsReport streams and feeds the autoscaler."""

    def __init__(self, sink: Callable[[StageMetrics], None] | ReplicationManager, host: str, port: int):
        self._feed = sink.feed if isinstance(sink, ReplicationManager) else sink
        self.server = transport.MessageServer(host, port, self._handle, name="logging")

    @property
    def address(self) -> str:
        return self.server.address

    def _handle(self, conn: transport.MessageConnection, message: wire.Message) -> Optional[wire.Message]:
        if message.kind == "MetricsReport" and "report" in message.body:
            self._feed(StageMetrics.from_dict(message.body["report"]))
            return None  # streamed, not acknowledged
        return message.reply_error("UnknownKind", f"logging service cannot serve {message.kind}")

    def close(self) -> None:
        self.server.close()
