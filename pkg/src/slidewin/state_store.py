"""Aggregation states and the per-task-processor key-value store.

States live in an in-memory map. ``snapshot`` writes the whole map plus the
log offsets it corresponds to into a new checkpoint directory and publishes it
with an atomic rename; ``restore`` picks the newest checkpoint whose manifest
and checksums verify.

Sums are kept exactly: every float is a dyadic rational, so scaling by 2**1074
turns each addend into an integer and add/subtract never drifts. Reading the
value back is a single correctly rounded integer division.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from . import _codec

log = logging.getLogger(__name__)

_SCALE_BITS = 1074
_SCALE = 1 << _SCALE_BITS


def exact(v) -> int:
    """Integer ``v * 2**1074``; exact for every finite float and int."""
    if isinstance(v, float):
        n, d = v.as_integer_ratio()
        return n << (_SCALE_BITS - d.bit_length() + 1)
    return int(v) << _SCALE_BITS


class AggregationState:
    kind = ""
    __slots__ = ()

    def empty(self) -> bool:
        raise NotImplementedError


class CountState(AggregationState):
    kind = "count"
    __slots__ = ("n",)

    def __init__(self, n: int = 0):
        self.n = n

    def add(self, v) -> None:
        self.n += 1

    def remove(self, v) -> None:
        self.n -= 1

    def value(self):
        return self.n

    def empty(self) -> bool:
        return self.n == 0

    def __eq__(self, other):
        return type(other) is CountState and other.n == self.n

    def __repr__(self):
        return f"CountState({self.n})"


class SumState(AggregationState):
    kind = "sum"
    __slots__ = ("total", "n")

    def __init__(self, total: int = 0, n: int = 0):
        self.total = total
        self.n = n

    def add(self, v) -> None:
        self.total += exact(v)
        self.n += 1

    def remove(self, v) -> None:
        self.total -= exact(v)
        self.n -= 1

    def value(self):
        return self.total / _SCALE

    def empty(self) -> bool:
        return self.n == 0

    def __eq__(self, other):
        return type(other) is type(self) and other.total == self.total and other.n == self.n

    def __repr__(self):
        return f"{type(self).__name__}(value={self.value()!r}, n={self.n})"


class AvgState(SumState):
    kind = "avg"
    __slots__ = ()

    def value(self):
        return self.total / (self.n << _SCALE_BITS) if self.n else None


class DistinctState(AggregationState):
    kind = "distinct_count"
    __slots__ = ("refs",)

    def __init__(self, refs: dict | None = None):
        self.refs = refs if refs is not None else {}

    def add(self, v) -> None:
        refs = self.refs
        refs[v] = refs.get(v, 0) + 1

    def remove(self, v) -> None:
        refs = self.refs
        c = refs[v] - 1
        if c:
            refs[v] = c
        else:
            del refs[v]

    def value(self):
        return len(self.refs)

    def empty(self) -> bool:
        return not self.refs

    def __eq__(self, other):
        return type(other) is DistinctState and other.refs == self.refs

    def __repr__(self):
        return f"DistinctState({len(self.refs)} values)"


STATE_TYPES = {"count": CountState, "sum": SumState, "avg": AvgState, "distinct_count": DistinctState}
_KIND_TAGS = {"count": 1, "sum": 2, "avg": 3, "distinct_count": 4}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


def new_state(kind: str) -> AggregationState:
    return STATE_TYPES[kind]()


def _encode_bigint(v: int, out: bytearray) -> None:
    raw = v.to_bytes((v.bit_length() + 8) // 8 or 1, "little", signed=True)
    out += struct.pack("<H", len(raw))
    out += raw


def _decode_bigint(buf, off: int):
    n = struct.unpack_from("<H", buf, off)[0]
    off += 2
    return int.from_bytes(buf[off:off + n], "little", signed=True), off + n


def encode_state(state: AggregationState) -> bytes:
    out = bytearray([_KIND_TAGS[state.kind]])
    if isinstance(state, CountState):
        out += struct.pack("<q", state.n)
    elif isinstance(state, SumState):
        _encode_bigint(state.total, out)
        out += struct.pack("<q", state.n)
    else:
        out += struct.pack("<I", len(state.refs))
        for v, c in state.refs.items():
            _codec.encode_scalar(v, out)
            out += struct.pack("<q", c)
    return bytes(out)


def decode_state(buf) -> AggregationState:
    kind = _TAG_KINDS.get(buf[0])
    if kind is None:
        raise _codec.CodecError(f"unknown state tag {buf[0]}")
    if kind == "count":
        return CountState(struct.unpack_from("<q", buf, 1)[0])
    if kind in ("sum", "avg"):
        total, off = _decode_bigint(buf, 1)
        return STATE_TYPES[kind](total, struct.unpack_from("<q", buf, off)[0])
    n = struct.unpack_from("<I", buf, 1)[0]
    off = 5
    refs = {}
    for _ in range(n):
        v, off = _codec.decode_scalar(buf, off)
        refs[v] = struct.unpack_from("<q", buf, off)[0]
        off += 8
    return DistinctState(refs)


def encode_key(key) -> bytes:
    """Canonical bytes for a ``(namespace, group_tuple)`` state key."""
    namespace, group = key
    out = bytearray()
    _codec.encode_str(namespace, out)
    out += _codec.encode_tuple(group)
    return bytes(out)


def decode_key(buf):
    namespace, off = _codec.decode_str(buf, 0)
    group, _ = _codec.decode_tuple(buf, off)
    return namespace, group


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    checkpoint_id: int
    offsets: dict
    reservoir_seq: int = 0
    states: dict = field(default_factory=dict, repr=False)
    aux: bytes = field(default=b"", repr=False)


_STATES_MAGIC = b"SSTS"
_FORMAT_VERSION = 1


def _encode_offsets(offsets: dict) -> bytes:
    out = bytearray(struct.pack("<I", len(offsets)))
    for (topic, partition), offset in sorted(offsets.items()):
        _codec.encode_str(topic, out)
        out += struct.pack("<IQ", partition, offset)
    return bytes(out)


def _decode_offsets(buf) -> dict:
    from .messaging import TopicPartition

    n = struct.unpack_from("<I", buf, 0)[0]
    off = 4
    offsets = {}
    for _ in range(n):
        topic, off = _codec.decode_str(buf, off)
        partition, offset = struct.unpack_from("<IQ", buf, off)
        off += 12
        offsets[TopicPartition(topic, partition)] = offset
    return offsets


class StateStore:
    """Map of state keys to aggregation states with checkpoint files under ``directory``.

    ``directory`` may be None for a purely in-memory store (snapshots disabled).
    """

    def __init__(self, directory=None, *, retain: int = 2, fsync: bool = True):
        self.directory = Path(directory) if directory is not None else None
        self.retain = retain
        self.fsync = fsync
        self._states: dict = {}
        self._encoded: dict = {}
        self._dirty: set = set()
        self._next_id = 1
        if self.directory is not None:
            (self.directory / "checkpoints").mkdir(parents=True, exist_ok=True)
            ids = self._checkpoint_ids()
            if ids:
                self._next_id = ids[-1] + 1

    def get(self, key):
        return self._states.get(key)

    def put(self, key, state: AggregationState) -> None:
        self._states[key] = state
        self._dirty.add(key)

    def delete(self, key) -> None:
        if self._states.pop(key, None) is not None:
            self._dirty.add(key)

    def __len__(self):
        return len(self._states)

    def __contains__(self, key):
        return key in self._states

    def items(self):
        return self._states.items()

    def keys(self):
        return self._states.keys()

    def clear(self) -> None:
        self._dirty.update(self._states)
        self._states.clear()

    def _checkpoint_ids(self) -> list:
        root = self.directory / "checkpoints"
        ids = []
        for p in root.iterdir():
            if p.name.isdigit():
                ids.append(int(p.name))
        return sorted(ids)

    def _encoded_view(self) -> list:
        """Re-encode keys touched since the last call; returns the (key, state) byte pairs."""
        encoded = self._encoded
        states = self._states
        for key in self._dirty:
            st = states.get(key)
            if st is None:
                encoded.pop(key, None)
            else:
                encoded[key] = (encode_key(key), encode_state(st))
        self._dirty.clear()
        return list(encoded.values())

    @staticmethod
    def _join(pairs: list) -> bytes:
        parts = [_STATES_MAGIC, struct.pack("<HQ", _FORMAT_VERSION, len(pairs))]
        for kb, sb in sorted(pairs):
            parts.append(struct.pack("<I", len(kb)))
            parts.append(kb)
            parts.append(struct.pack("<I", len(sb)))
            parts.append(sb)
        return b"".join(parts)

    def serialize(self) -> bytes:
        """Encode the full map, sorted by key bytes."""
        return self._join(self._encoded_view())

    def prepare_snapshot(self, offsets: dict, *, reservoir_seq: int = 0, aux: bytes = b""):
        """Capture an immutable snapshot on the owner thread; returns a writer callable.

        Only states touched since the previous snapshot are encoded here. The
        writer may run on any thread and returns the published Checkpoint.
        ``aux`` may be bytes or a callable producing them inside the writer.
        """
        if self.directory is None:
            raise CheckpointError("in-memory store cannot snapshot")
        cid = self._next_id
        self._next_id += 1
        pairs = self._encoded_view()
        offsets = dict(offsets)

        def write() -> Checkpoint:
            blob = aux() if callable(aux) else aux
            self._write_checkpoint(cid, self._join(pairs), _encode_offsets(offsets), reservoir_seq, blob)
            return Checkpoint(cid, offsets, reservoir_seq)

        return write

    def snapshot(self, offsets: dict, *, reservoir_seq: int = 0, aux: bytes = b"") -> Checkpoint:
        return self.prepare_snapshot(offsets, reservoir_seq=reservoir_seq, aux=aux)()

    def _write_checkpoint(self, cid, states_blob, offsets_blob, reservoir_seq, aux) -> None:
        root = self.directory / "checkpoints"
        final = root / f"{cid:020d}"
        tmp = root / f"{cid:020d}.tmp"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir()
        files = {"states.bin": states_blob, "offsets.bin": offsets_blob, "aux.bin": aux}
        for name, blob in files.items():
            _write_file(tmp / name, blob, self.fsync)
        manifest = {
            "id": cid,
            "version": _FORMAT_VERSION,
            "reservoir_seq": reservoir_seq,
            "files": {name: {"size": len(b), "crc32": zlib.crc32(b)} for name, b in files.items()},
        }
        body = json.dumps(manifest, sort_keys=True).encode()
        _write_file(tmp / "MANIFEST", body + b"\n" + f"{zlib.crc32(body):08x}\n".encode(), self.fsync)
        os.rename(tmp, final)
        if self.fsync:
            _fsync_dir(root)
        self._prune()

    def _prune(self) -> None:
        ids = self._checkpoint_ids()
        for old in ids[: max(0, len(ids) - self.retain)]:
            shutil.rmtree(self.directory / "checkpoints" / f"{old:020d}", ignore_errors=True)

    def _read_checkpoint(self, cid: int) -> Checkpoint:
        d = self.directory / "checkpoints" / f"{cid:020d}"
        raw = (d / "MANIFEST").read_bytes()
        body, _, tail = raw.rstrip(b"\n").rpartition(b"\n")
        if not body or f"{zlib.crc32(body):08x}".encode() != tail:
            raise CheckpointError(f"checkpoint {cid}: manifest checksum mismatch")
        manifest = json.loads(body)
        blobs = {}
        for name, meta in manifest["files"].items():
            blob = (d / name).read_bytes()
            if len(blob) != meta["size"] or zlib.crc32(blob) != meta["crc32"]:
                raise CheckpointError(f"checkpoint {cid}: {name} checksum mismatch")
            blobs[name] = blob
        states = _decode_states(blobs["states.bin"])
        offsets = _decode_offsets(blobs["offsets.bin"])
        return Checkpoint(cid, offsets, manifest["reservoir_seq"], states, blobs.get("aux.bin", b""))

    def restore(self) -> Checkpoint | None:
        """Load the newest valid checkpoint into the store. None means cold start."""
        self._states = {}
        self._encoded = {}
        self._dirty = set()
        if self.directory is None:
            return None
        root = self.directory / "checkpoints"
        for p in root.iterdir():
            if p.name.endswith(".tmp"):
                shutil.rmtree(p, ignore_errors=True)
        for cid in reversed(self._checkpoint_ids()):
            try:
                ckpt = self._read_checkpoint(cid)
            except (OSError, CheckpointError, ValueError, KeyError, struct.error) as exc:
                log.warning("skipping unreadable checkpoint %s: %s", cid, exc)
                continue
            self._states = ckpt.states
            self._dirty = set(ckpt.states)
            return ckpt
        return None


def _decode_states(blob: bytes) -> dict:
    if blob[:4] != _STATES_MAGIC:
        raise CheckpointError("bad states magic")
    version, n = struct.unpack_from("<HQ", blob, 4)
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"unsupported states version {version}")
    off = 14
    states = {}
    for _ in range(n):
        (kl,) = struct.unpack_from("<I", blob, off)
        off += 4
        key = decode_key(blob[off:off + kl])
        off += kl
        (sl,) = struct.unpack_from("<I", blob, off)
        off += 4
        states[key] = decode_state(blob[off:off + sl])
        off += sl
    return states


def _write_file(path: Path, blob: bytes, fsync: bool) -> None:
    with open(path, "wb") as fh:
        fh.write(blob)
        if fsync:
            fh.flush()
            os.fsync(fh.fileno())


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)
