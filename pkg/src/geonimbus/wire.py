"""Length-prefixed message framing shared by every networked component.

Byte layout of one frame::

    +----------------+----------------------------+
    | length (u32 BE)| payload (length bytes)     |
    +----------------+----------------------------+

The payload is a UTF-8 JSON object with exactly three keys::

    {"kind": <str>, "correlation_id": <int|str>, "body": <object>}

Binary values inside ``body`` are encoded as ``{"__b64__": "<base64>"}``
wrappers; everything else is plain JSON.  ``encode`` emits canonical JSON
(sorted keys, no whitespace) so equal messages produce equal bytes.
Payloads larger than ``MAX_MESSAGE_BYTES`` are refused on both sides; bulk
data travels as a sequence of ``TransferChunk`` messages (default chunk
``CHUNK_BYTES``) terminated by a ``TransferDone`` carrying a checksum.

Cross-version payload stability is a non-goal; the contract is this file
plus docs/protocol.md.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from typing import Any

from .errors import GeoNimbusError

MESSAGE_KINDS = (
    "DeployStage",
    "StageReady",
    "DataAvailable",
    "SubscribeCatalog",
    "TransferChunk",
    "TransferDone",
    "MetricsReport",
    "ScaleCommand",
    "Ack",
    "Error",
)

MAX_MESSAGE_BYTES = 64 * 1024 * 1024
CHUNK_BYTES = 4 * 1024 * 1024

_LENGTH = struct.Struct(">I")
_BYTES_TAG = "__b64__"


class WireError(GeoNimbusError):
    """Base for framing and payload errors."""


class OversizeMessage(WireError):
    """Encoded payload exceeds the configured maximum."""


class IncompleteFrame(WireError):
    """Fewer bytes available than the length prefix promises."""


class MalformedPayload(WireError):
    """Frame payload is not a well-formed message."""


class UnknownKind(WireError):
    """Message kind is not part of the protocol."""


@dataclass(frozen=True)
class Message:
    kind: str
    correlation_id: int | str
    body: dict = field(default_factory=dict)

    def reply_ack(self, body: dict | None = None) -> "Message":
        return Message("Ack", self.correlation_id, body or {})

    def reply_error(self, code: str, message: str) -> "Message":
        return Message("Error", self.correlation_id, {"code": code, "message": message})


def _tag_bytes(value: Any) -> Any:
    if isinstance(value, (bytes, bytearray, memoryview)):
        return {_BYTES_TAG: base64.b64encode(bytes(value)).decode("ascii")}
    if isinstance(value, dict):
        return {k: _tag_bytes(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_tag_bytes(v) for v in value]
    return value


def _untag_bytes(value: Any) -> Any:
    if isinstance(value, dict):
        if set(value.keys()) == {_BYTES_TAG}:
            try:
                return base64.b64decode(value[_BYTES_TAG], validate=True)
            except (ValueError, TypeError) as exc:  # binascii.Error is a ValueError
                raise MalformedPayload(f"bad base64 in payload: {exc}") from exc
        return {k: _untag_bytes(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_untag_bytes(v) for v in value]
    return value


def encode(message: Message, *, max_bytes: int = MAX_MESSAGE_BYTES) -> bytes:
    """Encode a message into one frame (length prefix + canonical JSON)."""
    if message.kind not in MESSAGE_KINDS:
        raise UnknownKind(f"cannot encode message of kind {message.kind!r}")
    payload_obj = {
        "kind": message.kind,
        "correlation_id": message.correlation_id,
        "body": _tag_bytes(message.body),
    }
    payload = json.dumps(payload_obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(payload) > max_bytes:
        raise OversizeMessage(f"payload is {len(payload)} bytes, max {max_bytes}")
    return _LENGTH.pack(len(payload)) + payload


def decode(data: bytes, *, max_bytes: int = MAX_MESSAGE_BYTES) -> tuple[Message, int]:
    """Decode the first complete frame in ``data``.

    Returns the message and the count of consumed bytes.  Never reads past
    the announced frame length, so concatenated frames decode one at a
    time.
    """
    if len(data) < _LENGTH.size:
        raise IncompleteFrame(f"need {_LENGTH.size} header bytes, have {len(data)}")
    (length,) = _LENGTH.unpack_from(data)
    if length < 1:
        raise MalformedPayload("length prefix must be >= 1")
    if length > max_bytes:
        raise MalformedPayload(f"announced payload of {length} bytes exceeds max {max_bytes}")
    end = _LENGTH.size + length
    if len(data) < end:
        raise IncompleteFrame(f"frame announces {length} payload bytes, have {len(data) - _LENGTH.size}")
    payload = data[_LENGTH.size:end]
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(f"payload is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or set(obj.keys()) != {"kind", "correlation_id", "body"}:
        raise MalformedPayload("payload must be an object with kind/correlation_id/body")
    kind = obj["kind"]
    if kind not in MESSAGE_KINDS:
        raise UnknownKind(f"unknown message kind {kind!r}")
    correlation_id = obj["correlation_id"]
    if not isinstance(correlation_id, (int, str)) or isinstance(correlation_id, bool):
        raise MalformedPayload("correlation_id must be an integer or string")
    body = obj["body"]
    if not isinstance(body, dict):
        raise MalformedPayload("body must be an object")
    return Message(kind=kind, correlation_id=correlation_id, body=_untag_bytes(body)), end
