"""
==========================================
Content-addressed stores and the catalog
==========================================

Data stores hold immutable payloads keyed by content digest.  The
storage manager keeps a catalog of published items, moves bytes
between stores on subscription, and places promoted items on the
least-utilized global store.  Every step leaves an event, so the
push -> publish -> subscribe -> transfer order is checkable.
"""

import tempfile
from pathlib import Path

from geonimbus.storage import (
    DataStore,
    EventLog,
    LocalStoreBinding,
    StorageManager,
    UtilizationFactor,
)

root = Path(tempfile.mkdtemp(prefix="geonimbus-demo-"))
events = EventLog()
manager = StorageManager(root / "manager", events=events)

source = DataStore("lab-local", root / "lab", kind="local", endpoint="lab", events=events)
mirror = DataStore("field-local", root / "field", kind="local", endpoint="field", events=events)
manager.register_store(LocalStoreBinding(source))
manager.register_store(LocalStoreBinding(mirror))

# ---------------------------------------------------------------------------
# push is content-addressed: same bytes, same id, stored once
# ---------------------------------------------------------------------------

item = source.push(b"a raster tile", "ingest")
again = source.push(b"a raster tile", "ingest")
print(f"pushed item {item.id[:16]}... ({item.size_bytes} bytes)")
print(f"duplicate push returned the same id: {item.id == again.id}")
print(f"store holds {len(source.items())} item(s), {source.info().used_bytes} bytes used")

# ---------------------------------------------------------------------------
# publish + subscribe: the manager relays bytes and verifies digests
# ---------------------------------------------------------------------------

entry = manager.publish_catalog(item, "lab-local")
manager.subscribe(entry, "field-local")
print(f"entry state after transfer: {entry.state}, delivered to {sorted(entry.delivered_to)}")
print(f"mirror now holds the payload: {mirror.pull(item.id) == b'a raster tile'}")

print("event order for this item:")
for event in events.events():
    if event.item_id == item.id:
        print(f"  seq {event.seq}: {event.kind} @ {event.store_id}")

# ---------------------------------------------------------------------------
# global placement: argmin utilization factor, lexicographic tie-break
# ---------------------------------------------------------------------------

for name in ("archive-a", "archive-b"):
    store = DataStore(name, root / name, kind="global",
                      capacity_bytes=4096, endpoint="vault")
    manager.register_store(LocalStoreBinding(store))

placements = []
for i in range(6):
    payload = f"measurement {i}".encode().ljust(256, b".")
    local_item = source.push(payload, "sensor")
    manager.publish_catalog(local_item, "lab-local")
    promoted = manager.promote_to_global(local_item.id)
    placements.append(promoted.source_store)
    factor = UtilizationFactor.of(manager.store_info(promoted.source_store))
    print(f"item {i} -> {promoted.source_store} (utilization now {factor.value:.3f})")
print(f"equal items alternate across equal stores: {placements}")
