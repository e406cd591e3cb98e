"""
=====================================
Frames on the wire
=====================================

Every conversation between controller, daemons, and the storage
manager is length-prefixed frames: a 4-byte big-endian payload size,
then canonical JSON for one message.  Binary payloads ride inside the
JSON as tagged base64.  Decoding is strict; garbage is rejected with a
typed error instead of a crash.
"""

import binascii

from geonimbus import wire

# ---------------------------------------------------------------------------
# encode one message of each flavor
# ---------------------------------------------------------------------------

ack = wire.Message(kind="Ack", correlation_id=7, body={"ok": True})
frame = wire.encode(ack)
print(f"Ack frame, {len(frame)} bytes:")
print(" ", binascii.hexlify(frame[:4]).decode(), "<- payload length")
print(" ", frame[4:].decode())

chunk = wire.Message(
    kind="TransferChunk",
    correlation_id="xfer-1",
    body={"item_id": "abc", "index": 0, "data": b"\x00\x01raster bytes\xff"},
)
chunk_frame = wire.encode(chunk)
print(f"TransferChunk frame carries bytes as tagged base64 ({len(chunk_frame)} bytes)")

# ---------------------------------------------------------------------------
# decode returns the message plus how much of the buffer it consumed,
# so a socket reader can peel frames off a growing buffer
# ---------------------------------------------------------------------------

buffer = frame + chunk_frame
first, used = wire.decode(buffer)
second, used2 = wire.decode(buffer[used:])
assert first == ack and second == chunk
print(f"two frames decoded from one buffer ({used} + {used2} bytes)")
assert second.body["data"] == b"\x00\x01raster bytes\xff"
print("binary payload survived the roundtrip byte for byte")

# ---------------------------------------------------------------------------
# strictness: truncated, empty, oversized, and unknown frames all refuse
# ---------------------------------------------------------------------------

for label, attempt in [
    ("truncated header", frame[:2]),
    ("truncated payload", frame[:-3]),
    ("zero-length frame", (0).to_bytes(4, "big")),
    ("not JSON", len(b"hi").to_bytes(4, "big") + b"hi"),
]:
    try:
        wire.decode(attempt)
    except wire.WireError as exc:
        print(f"{label}: {type(exc).__name__}")

try:
    wire.encode(wire.Message(kind="NotAKind", correlation_id=1, body={}))
except wire.UnknownKind as exc:
    print(f"unknown kind rejected at encode time: {exc}")
