"""Binary encodings shared by the log, the reservoir and the state store.

Scalars are tagged so that a canonical byte form exists for any tuple of
field values; that form feeds routing hashes and state keys.
"""

from __future__ import annotations

import math
import struct

TAG_NONE = 0
TAG_INT = 1
TAG_FLOAT = 2
TAG_STR = 3
TAG_BOOL = 4

_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

EVENT_VERSION = 1
_EVENT_HEAD = struct.Struct("<BqQH")


class CodecError(ValueError):
    pass


def encode_scalar(value, out: bytearray) -> None:
    if value is None:
        out.append(TAG_NONE)
    elif value is True or value is False:
        out.append(TAG_BOOL)
        out.append(1 if value else 0)
    elif isinstance(value, int):
        out.append(TAG_INT)
        out += _I64.pack(value)
    elif isinstance(value, float):
        out.append(TAG_FLOAT)
        out += _F64.pack(value)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(TAG_STR)
        out += _U32.pack(len(raw))
        out += raw
    else:
        raise CodecError(f"unsupported scalar type {type(value).__name__}")


def decode_scalar(buf, off: int):
    tag = buf[off]
    off += 1
    if tag == TAG_INT:
        return _I64.unpack_from(buf, off)[0], off + 8
    if tag == TAG_FLOAT:
        return _F64.unpack_from(buf, off)[0], off + 8
    if tag == TAG_STR:
        n = _U32.unpack_from(buf, off)[0]
        off += 4
        return bytes(buf[off:off + n]).decode("utf-8"), off + n
    if tag == TAG_BOOL:
        return buf[off] == 1, off + 1
    if tag == TAG_NONE:
        return None, off
    raise CodecError(f"unknown scalar tag {tag}")


def encode_tuple(values) -> bytes:
    """Canonical, injective encoding of a tuple of scalars."""
    out = bytearray(_U16.pack(len(values)))
    for v in values:
        encode_scalar(v, out)
    return bytes(out)


def decode_tuple(buf, off: int = 0):
    n = _U16.unpack_from(buf, off)[0]
    off += 2
    items = []
    for _ in range(n):
        v, off = decode_scalar(buf, off)
        items.append(v)
    return tuple(items), off


def encode_str(s: str, out: bytearray) -> None:
    raw = s.encode("utf-8")
    out += _U16.pack(len(raw))
    out += raw


def decode_str(buf, off: int):
    n = _U16.unpack_from(buf, off)[0]
    off += 2
    return bytes(buf[off:off + n]).decode("utf-8"), off + n


def encode_event(event) -> bytes:
    out = bytearray(_EVENT_HEAD.pack(EVENT_VERSION, event.timestamp, event.ingest_id, len(event.fields)))
    for name, value in event.fields.items():
        encode_str(name, out)
        encode_scalar(value, out)
    return bytes(out)


def decode_event(buf):
    from .model import Event

    if len(buf) < _EVENT_HEAD.size:
        raise CodecError("truncated event payload")
    version, ts, ingest_id, n = _EVENT_HEAD.unpack_from(buf, 0)
    if version != EVENT_VERSION:
        raise CodecError(f"unsupported event version {version}")
    off = _EVENT_HEAD.size
    fields = {}
    try:
        for _ in range(n):
            name, off = decode_str(buf, off)
            fields[name], off = decode_scalar(buf, off)
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise CodecError(f"malformed event payload: {exc}") from exc
    if off != len(buf):
        raise CodecError("trailing bytes after event payload")
    return Event(ts, fields, ingest_id)


def is_finite_number(v) -> bool:
    return isinstance(v, int) or (isinstance(v, float) and math.isfinite(v))
