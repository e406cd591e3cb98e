"""Wide-area storage: content-addressed data stores and the storage manager.

A :class:`DataStore` keeps payloads on disk under ``<root>/<id[:2]>/<id>``
(ids are SHA-256 hex digests of the content) plus an append-only
``store.log`` so a restarted process can rebuild its accounting.  The
:class:`StorageManager` holds the catalog metadata, standing
subscriptions, and brokers every inter-store transfer: bytes always move
source -> manager -> target, and the target re-verifies the digest before
anything becomes visible to a consumer.

Every step of a link execution is recorded on an :class:`EventLog` in the
fixed order ``push, publish, subscribe, transfer, input-write`` so runs
can be audited for flow violations.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol

from .errors import GeoNimbusError


class StoreFull(GeoNimbusError):
    """Store lacks capacity for the payload."""


class IoFailure(GeoNimbusError):
    """Underlying filesystem operation failed."""


class NotFound(GeoNimbusError):
    """No item with the requested id."""


class CorruptItem(GeoNimbusError):
    """Stored payload no longer matches its content digest."""


class UnknownStore(GeoNimbusError):
    """Store id is not registered with the manager."""


class UnknownEntry(GeoNimbusError):
    """Catalog entry does not exist."""


class SelfSubscription(GeoNimbusError):
    """A store may not subscribe to its own published entry."""


class TransferFailed(GeoNimbusError):
    """Transfer could not be completed (retryable)."""


class DigestMismatch(GeoNimbusError):
    """Delivered bytes do not match the catalog digest."""


class NoCapacity(GeoNimbusError):
    """No global store can hold the payload."""


def content_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------

EVENT_PUSH = "push"
EVENT_PUBLISH = "publish"
EVENT_SUBSCRIBE = "subscribe"
EVENT_TRANSFER = "transfer"
EVENT_INPUT_WRITE = "input-write"


@dataclass(frozen=True)
class Event:
    seq: int
    kind: str
    item_id: str
    store_id: str
    stage: Optional[str] = None
    link: Optional[str] = None
    at: float = 0.0


class EventLog:
    """Thread-safe, append-only record of storage-flow events."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._events: list[Event] = []
        self._seq = itertools.count()

    def emit(self, kind: str, item_id: str, store_id: str, stage: str | None = None, link: str | None = None) -> Event:
        with self._lock:
            event = Event(next(self._seq), kind, item_id, store_id, stage, link, time.time())
            self._events.append(event)
            return event

    def events(self, kind: str | None = None) -> list[Event]:
        with self._lock:
            snapshot = list(self._events)
        if kind is None:
            return snapshot
        return [e for e in snapshot if e.kind == kind]

    def for_link(self, item_id: str, link: str) -> list[Event]:
        """Events relevant to one link execution: the item's push/publish
        plus this link's subscribe/transfer/input-write, in seq order."""
        shared = {EVENT_PUSH, EVENT_PUBLISH}
        return [
            e
            for e in self.events()
            if e.item_id == item_id and (e.kind in shared or e.link == link)
        ]


# ---------------------------------------------------------------------------
# Data stores
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataItem:
    id: str
    size_bytes: int
    producer_stage: str
    created_at: float
    locator: str

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "size_bytes": self.size_bytes,
            "producer_stage": self.producer_stage,
            "created_at": self.created_at,
            "locator": self.locator,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DataItem":
        return cls(
            id=doc["id"],
            size_bytes=int(doc["size_bytes"]),
            producer_stage=doc["producer_stage"],
            created_at=float(doc["created_at"]),
            locator=doc.get("locator", ""),
        )


@dataclass(frozen=True)
class StoreInfo:
    store_id: str
    kind: str  # "local" | "global"
    capacity_bytes: int
    used_bytes: int
    endpoint: str

    def to_dict(self) -> dict:
        return {
            "store_id": self.store_id,
            "kind": self.kind,
            "capacity_bytes": self.capacity_bytes,
            "used_bytes": self.used_bytes,
            "endpoint": self.endpoint,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StoreInfo":
        return cls(
            store_id=doc["store_id"],
            kind=doc["kind"],
            capacity_bytes=int(doc["capacity_bytes"]),
            used_bytes=int(doc["used_bytes"]),
            endpoint=doc["endpoint"],
        )


@dataclass(frozen=True)
class UtilizationFactor:
    value: float

    @classmethod
    def of(cls, info: StoreInfo) -> "UtilizationFactor":
        if info.capacity_bytes <= 0:
            return cls(1.0)
        return cls(info.used_bytes / info.capacity_bytes)


class DataStore:
    """Content-addressed store over one root directory.

    Safe for concurrent push/pull from multiple stage workers.  Identical
    bytes pushed twice deduplicate to one payload and one accounting entry.
    """

    LOG_NAME = "store.log"

    def __init__(
        self,
        store_id: str,
        root: str | Path,
        *,
        kind: str = "local",
        capacity_bytes: int = 1 << 40,
        endpoint: str = "",
        events: EventLog | None = None,
    ) -> None:
        self.store_id = store_id
        self.kind = kind
        self.capacity_bytes = capacity_bytes
        self.endpoint = endpoint
        self.root = Path(root)
        self.events = events
        self._lock = threading.Lock()
        self._items: dict[str, DataItem] = {}
        self._used = 0
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            self._replay_log()
        except OSError as exc:
            raise IoFailure(f"cannot initialize store at {self.root}: {exc}") from exc

    # -- internals ----------------------------------------------------------

    def _log_path(self) -> Path:
        return self.root / self.LOG_NAME

    def _payload_path(self, item_id: str) -> Path:
        return self.root / item_id[:2] / item_id

    def _replay_log(self) -> None:
        log = self._log_path()
        if not log.exists():
            return
        for line in log.read_text().splitlines():
            if not line.strip():
                continue
            doc = json.loads(line)
            if doc["op"] == "push":
                item = DataItem.from_dict(doc["item"])
                if item.id not in self._items:
                    self._items[item.id] = item
                    self._used += item.size_bytes
            elif doc["op"] == "delete":
                item = self._items.pop(doc["id"], None)
                if item is not None:
                    self._used -= item.size_bytes

    def _append_log(self, doc: dict) -> None:
        with open(self._log_path(), "a") as fh:
            fh.write(json.dumps(doc, sort_keys=True) + "\n")

    # -- public surface ------------------------------------------------------

    def info(self) -> StoreInfo:
        with self._lock:
            return StoreInfo(self.store_id, self.kind, self.capacity_bytes, self._used, self.endpoint)

    def contains(self, item_id: str) -> bool:
        with self._lock:
            return item_id in self._items

    def items(self) -> list[DataItem]:
        with self._lock:
            return list(self._items.values())

    def get_item(self, item_id: str) -> DataItem:
        with self._lock:
            try:
                return self._items[item_id]
            except KeyError:
                raise NotFound(f"{item_id} not in store {self.store_id}") from None

    def push(self, data: bytes, producer_stage: str, *, record_event: bool = True) -> DataItem:
        """Persist ``data`` and return its content-addressed item.

        Raises :class:`StoreFull` when the store cannot take the payload,
        :class:`IoFailure` on filesystem trouble.
        """
        item_id = content_id(data)
        with self._lock:
            existing = self._items.get(item_id)
            if existing is None:
                if self._used + len(data) > self.capacity_bytes:
                    raise StoreFull(
                        f"store {self.store_id}: {len(data)} bytes over capacity "
                        f"({self._used}/{self.capacity_bytes} used)"
                    )
                path = self._payload_path(item_id)
                try:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    tmp = path.with_suffix(".tmp")
                    tmp.write_bytes(data)
                    os.replace(tmp, path)
                except OSError as exc:
                    raise IoFailure(f"store {self.store_id}: write failed: {exc}") from exc
                item = DataItem(
                    id=item_id,
                    size_bytes=len(data),
                    producer_stage=producer_stage,
                    created_at=time.time(),
                    locator=str(path.relative_to(self.root)),
                )
                self._items[item_id] = item
                self._used += len(data)
                self._append_log({"op": "push", "item": item.to_dict()})
            else:
                item = existing
        if record_event and self.events is not None:
            self.events.emit(EVENT_PUSH, item_id, self.store_id, stage=producer_stage)
        return item

    def pull(self, item_id: str) -> bytes:
        """Return the exact stored bytes, digest-verified."""
        item = self.get_item(item_id)
        try:
            data = self._payload_path(item_id).read_bytes()
        except FileNotFoundError:
            raise NotFound(f"{item_id} payload missing from store {self.store_id}") from None
        except OSError as exc:
            raise IoFailure(f"store {self.store_id}: read failed: {exc}") from exc
        if content_id(data) != item.id:
            raise CorruptItem(f"{item_id} payload digest mismatch in store {self.store_id}")
        return data

    def delete(self, item_id: str) -> None:
        with self._lock:
            item = self._items.pop(item_id, None)
            if item is None:
                raise NotFound(f"{item_id} not in store {self.store_id}")
            self._used -= item.size_bytes
            self._append_log({"op": "delete", "id": item_id})
        try:
            self._payload_path(item_id).unlink(missing_ok=True)
        except OSError as exc:
            raise IoFailure(f"store {self.store_id}: delete failed: {exc}") from exc


# ---------------------------------------------------------------------------
# Storage manager
# ---------------------------------------------------------------------------

STATE_PUBLISHED = "published"
STATE_TRANSFERRING = "transferring"
STATE_DELIVERED = "delivered"


@dataclass
class CatalogEntry:
    item: DataItem
    source_store: str
    subscribers: set = field(default_factory=set)
    state: str = STATE_PUBLISHED
    delivered_to: set = field(default_factory=set)
    system: str = ""

    @property
    def key(self) -> str:
        return f"{self.item.id}@{self.source_store}"


@dataclass(frozen=True)
class Route:
    """Standing subscription: deliveries for one network link."""

    system: str
    producer_stage: str
    consumer_stage: str
    target_store: str

    @property
    def link(self) -> str:
        return f"{self.producer_stage}->{self.consumer_stage}"


class StoreBinding(Protocol):
    """Manager-side handle on a registered store.

    ``fetch`` relays payload bytes to the manager; ``deliver`` writes them
    into the store (and, when ``consumer_stage`` is set, into that stage's
    input directory, enqueueing the task).  Both ends of a transfer verify
    the content digest.
    """

    def info(self) -> StoreInfo: ...

    def fetch(self, item_id: str) -> bytes: ...

    def deliver(
        self,
        item: DataItem,
        payload: bytes,
        consumer_stage: str | None,
        link: str | None,
    ) -> StoreInfo: ...


class LocalStoreBinding:
    """Binding for a store living in this process (no daemon attached)."""

    def __init__(self, store: DataStore):
        self.store = store

    def info(self) -> StoreInfo:
        return self.store.info()

    def fetch(self, item_id: str) -> bytes:
        return self.store.pull(item_id)

    def deliver(self, item, payload, consumer_stage, link) -> StoreInfo:
        self.store.push(payload, item.producer_stage, record_event=False)
        if self.store.events is not None:
            self.store.events.emit(EVENT_TRANSFER, item.id, self.store.store_id, stage=consumer_stage, link=link)
        return self.store.info()


@dataclass(frozen=True)
class DeliveryReceipt:
    item_id: str
    target_store: str
    consumer_stage: Optional[str]
    bytes_moved: int


class StorageManager:
    """Catalog metadata service plus transfer broker.

    Metadata mutations append to ``<root>/manager.log`` so a restarted
    manager rebuilds its catalog; payload bytes are never persisted here,
    only relayed.
    """

    LOG_NAME = "manager.log"

    def __init__(self, root: str | Path, *, events: EventLog | None = None) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.events = events or EventLog()
        self._lock = threading.Lock()
        self._bindings: dict[str, StoreBinding] = {}
        self._infos: dict[str, StoreInfo] = {}
        self._entries: dict[str, CatalogEntry] = {}
        self._routes: list[Route] = []
        self._entry_locks: dict[str, threading.Lock] = {}
        self._pending_transfers = 0
        self._replay_log()

    # -- persistence ---------------------------------------------------------

    def _append_log(self, doc: dict) -> None:
        with open(self.root / self.LOG_NAME, "a") as fh:
            fh.write(json.dumps(doc, sort_keys=True) + "\n")

    def _replay_log(self) -> None:
        log = self.root / self.LOG_NAME
        if not log.exists():
            return
        for line in log.read_text().splitlines():
            if not line.strip():
                continue
            doc = json.loads(line)
            op = doc["op"]
            if op == "register_store":
                info = StoreInfo.from_dict(doc["info"])
                self._infos[info.store_id] = info
            elif op == "publish":
                entry = CatalogEntry(
                    item=DataItem.from_dict(doc["item"]),
                    source_store=doc["source_store"],
                    system=doc.get("system", ""),
                )
                self._entries.setdefault(entry.key, entry)
            elif op == "subscribe":
                entry = self._entries.get(doc["key"])
                if entry is not None:
                    entry.subscribers.add(doc["target"])
            elif op == "state":
                entry = self._entries.get(doc["key"])
                if entry is not None:
                    entry.state = doc["state"]
                    if doc.get("delivered_to"):
                        entry.delivered_to.add(doc["delivered_to"])
            elif op == "route":
                self._routes.append(
                    Route(
                        system=doc["system"],
                        producer_stage=doc["producer_stage"],
                        consumer_stage=doc["consumer_stage"],
                        target_store=doc["target_store"],
                    )
                )

    # -- registration --------------------------------------------------------

    def register_store(self, binding: StoreBinding) -> StoreInfo:
        info = binding.info()
        with self._lock:
            known = info.store_id in self._infos
            self._bindings[info.store_id] = binding
            self._infos[info.store_id] = info
            if not known:
                self._append_log({"op": "register_store", "info": info.to_dict()})
        return info

    def stores(self, kind: str | None = None) -> list[StoreInfo]:
        with self._lock:
            infos = list(self._infos.values())
        if kind is not None:
            infos = [i for i in infos if i.kind == kind]
        return infos

    def store_info(self, store_id: str) -> StoreInfo:
        with self._lock:
            try:
                return self._infos[store_id]
            except KeyError:
                raise UnknownStore(f"store {store_id!r} is not registered") from None

    def _binding(self, store_id: str) -> StoreBinding:
        with self._lock:
            try:
                return self._bindings[store_id]
            except KeyError:
                raise UnknownStore(f"store {store_id!r} is not registered") from None

    def add_route(self, route: Route) -> None:
        """Install a standing subscription for one network link."""
        with self._lock:
            if route not in self._routes:
                self._routes.append(route)
                self._append_log(
                    {
                        "op": "route",
                        "system": route.system,
                        "producer_stage": route.producer_stage,
                        "consumer_stage": route.consumer_stage,
                        "target_store": route.target_store,
                    }
                )

    # -- catalog -------------------------------------------------------------

    def publish_catalog(self, item: DataItem, source_store: str, *, system: str = "") -> CatalogEntry:
        """Record a catalog entry; idempotent per (item id, source store)."""
        with self._lock:
            if source_store not in self._infos:
                raise UnknownStore(f"store {source_store!r} is not registered")
            key = f"{item.id}@{source_store}"
            entry = self._entries.get(key)
            fresh = entry is None
            if fresh:
                entry = CatalogEntry(item=item, source_store=source_store, system=system)
                self._entries[key] = entry
                self._entry_locks[key] = threading.Lock()
                self._append_log(
                    {"op": "publish", "item": item.to_dict(), "source_store": source_store, "system": system}
                )
        if fresh:
            self.events.emit(EVENT_PUBLISH, item.id, source_store, stage=item.producer_stage)
        return entry

    def entry(self, key: str) -> CatalogEntry:
        with self._lock:
            try:
                return self._entries[key]
            except KeyError:
                raise UnknownEntry(f"no catalog entry {key!r}") from None

    def entries(self, *, system: str | None = None, producer_stage: str | None = None) -> list[CatalogEntry]:
        with self._lock:
            out = list(self._entries.values())
        if system is not None:
            out = [e for e in out if e.system == system]
        if producer_stage is not None:
            out = [e for e in out if e.item.producer_stage == producer_stage]
        return out

    def find_entry(self, item_id: str) -> CatalogEntry:
        with self._lock:
            for entry in self._entries.values():
                if entry.item.id == item_id:
                    return entry
        raise UnknownEntry(f"no catalog entry for item {item_id}")

    def subscribe(self, entry: CatalogEntry, target_store: str, *, consumer_stage: str | None = None,
                  link: str | None = None, transfer_now: bool = True) -> CatalogEntry:
        """Add ``target_store`` to the entry's subscribers and schedule the
        transfer.  Raises :class:`SelfSubscription` when target == source."""
        if target_store == entry.source_store:
            raise SelfSubscription(f"store {target_store!r} published this entry itself")
        with self._lock:
            if entry.key not in self._entries:
                raise UnknownEntry(f"no catalog entry {entry.key!r}")
            if target_store not in self._infos:
                raise UnknownStore(f"store {target_store!r} is not registered")
            entry.subscribers.add(target_store)
            self._append_log({"op": "subscribe", "key": entry.key, "target": target_store})
        self.events.emit(
            EVENT_SUBSCRIBE, entry.item.id, target_store,
            stage=consumer_stage, link=link,
        )
        if transfer_now:
            self.transfer(entry, target_store, consumer_stage=consumer_stage, link=link)
        return entry

    # -- transfers -----------------------------------------------------------

    def pending_transfers(self) -> int:
        with self._lock:
            return self._pending_transfers

    def _set_state(self, entry: CatalogEntry, state: str, delivered_to: str | None = None) -> None:
        with self._lock:
            order = [STATE_PUBLISHED, STATE_TRANSFERRING, STATE_DELIVERED]
            if order.index(state) > order.index(entry.state):
                entry.state = state
            if delivered_to:
                entry.delivered_to.add(delivered_to)
            self._append_log({"op": "state", "key": entry.key, "state": entry.state, "delivered_to": delivered_to})

    def transfer(self, entry: CatalogEntry, target_store: str, *, consumer_stage: str | None = None,
                 link: str | None = None) -> DeliveryReceipt:
        """Relay one entry's payload source -> manager -> target.

        The payload digest is re-verified against the catalog id on both
        hops; one retry on transient failure.
        """
        if target_store not in entry.subscribers:
            raise UnknownEntry(f"{target_store} is not subscribed to {entry.key}")
        source = self._binding(entry.source_store)
        target = self._binding(target_store)
        entry_lock = self._entry_locks.setdefault(entry.key, threading.Lock())
        with self._lock:
            self._pending_transfers += 1
        try:
            with entry_lock:
                self._set_state(entry, STATE_TRANSFERRING)
                last_exc: Exception | None = None
                for _ in range(2):
                    try:
                        payload = source.fetch(entry.item.id)
                        break
                    except (NotFound, CorruptItem, DigestMismatch):
                        raise
                    except GeoNimbusError as exc:
                        last_exc = exc
                else:
                    raise TransferFailed(f"fetch of {entry.item.id} from {entry.source_store} failed: {last_exc}")
                if content_id(payload) != entry.item.id:
                    raise DigestMismatch(f"relayed bytes for {entry.item.id} fail digest check at manager")
                new_info = target.deliver(entry.item, payload, consumer_stage, link)
                with self._lock:
                    self._infos[target_store] = new_info
                self._set_state(
                    entry,
                    STATE_DELIVERED if entry.subscribers <= (entry.delivered_to | {target_store}) else STATE_TRANSFERRING,
                    delivered_to=target_store,
                )
                return DeliveryReceipt(entry.item.id, target_store, consumer_stage, entry.item.size_bytes)
        finally:
            with self._lock:
                self._pending_transfers -= 1

    def deliver_routes(self, entry: CatalogEntry) -> list[DeliveryReceipt]:
        """Apply every standing route matching a freshly published entry."""
        with self._lock:
            routes = [
                r
                for r in self._routes
                if r.system == entry.system and r.producer_stage == entry.item.producer_stage
            ]
        receipts = []
        for route in routes:
            self.subscribe(entry, route.target_store, consumer_stage=route.consumer_stage,
                           link=route.link, transfer_now=False)
            receipts.append(
                self.transfer(entry, route.target_store, consumer_stage=route.consumer_stage, link=route.link)
            )
        return receipts

    def publish_and_route(self, item: DataItem, source_store: str, *, system: str = "") -> list[DeliveryReceipt]:
        entry = self.publish_catalog(item, source_store, system=system)
        return self.deliver_routes(entry)

    # -- global placement ----------------------------------------------------

    def select_global_store(self, size_bytes: int) -> StoreInfo:
        """Pick the least-utilized global store with room for ``size_bytes``.

        Ties break toward the lexicographically smallest store id.
        """
        with self._lock:
            candidates = [
                info
                for info in self._infos.values()
                if info.kind == "global" and info.capacity_bytes - info.used_bytes >= size_bytes
            ]
        if not candidates:
            raise NoCapacity(f"no global store has {size_bytes} free bytes")
        return min(candidates, key=lambda i: (UtilizationFactor.of(i).value, i.store_id))

    def promote_to_global(self, item_id: str) -> CatalogEntry:
        """Copy a locally stored item onto a global store and publish it
        there.  Explicit operator action; never triggered automatically."""
        source_entry = None
        with self._lock:
            for entry in self._entries.values():
                if entry.item.id == item_id and self._infos[entry.source_store].kind == "local":
                    source_entry = entry
                    break
        if source_entry is None:
            raise NotFound(f"item {item_id} is not published on any local store")
        target_info = self.select_global_store(source_entry.item.size_bytes)
        self.subscribe(source_entry, target_info.store_id, transfer_now=False)
        self.transfer(source_entry, target_info.store_id)
        promoted = replace(source_entry.item, locator="")
        return self.publish_catalog(promoted, target_info.store_id, system=source_entry.system)

    # -- retrieval -----------------------------------------------------------

    def fetch_bytes(self, item_id: str) -> bytes:
        """Pull an item's payload through the manager from whichever store
        holds it (source store of its first catalog entry)."""
        entry = self.find_entry(item_id)
        payload = self._binding(entry.source_store).fetch(item_id)
        if content_id(payload) != item_id:
            raise DigestMismatch(f"fetched bytes for {item_id} fail digest check")
        return payload
