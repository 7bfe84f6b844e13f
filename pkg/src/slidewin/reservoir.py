"""Disk-backed event reservoir.

Events are appended to an in-memory open chunk. A full chunk is sealed and
handed to a background I/O pool which encodes, compresses and writes it to an
immutable file ``NNNNNNNN.chk``. Windows read the reservoir through iterators;
an iterator pins the chunk it is reading and, on entering a chunk, asks the pool
to load the following one so that the next crossing normally finds it cached.

Threading contract: one owner thread calls ``append`` and drives iterators.
Pool threads only touch sealed (immutable) chunks and report back through a
queue that the owner drains; the cache itself is owner-only and lock-free.

Chunk file layout (little endian)::

    header  magic "RSVC" | version u16 | flags u16 | first_seq u64
    body    zlib(columnar block)
    footer  crc32(header + body) u32 | min_ts i64 | max_ts i64 | event_count u32
"""

from __future__ import annotations

import atexit
import bisect
import logging
import os
import queue
import struct
import threading
import zlib
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Event, _raw_event

log = logging.getLogger(__name__)

CHUNK_MAGIC = b"RSVC"
CHUNK_VERSION = 1
_HEADER = struct.Struct("<4sHHQ")
_FOOTER = struct.Struct("<IqqI")
_FOOTER_FIELDS = struct.Struct("<qqI")   # covered by the footer crc

_T_MISSING, _T_INT, _T_FLOAT, _T_STR, _T_BOOL = 0, 1, 2, 3, 4
_MISSING = object()


class ReservoirError(Exception):
    pass


class OutOfRetentionError(ReservoirError):
    pass


class CorruptChunkError(ReservoirError):
    pass


# ---------------------------------------------------------------- chunk codec


def _encode_column(values: list, out: list) -> None:
    n = len(values)
    tags = bytearray(n)
    ints, floats, strs, bools = [], [], [], []
    for i, v in enumerate(values):
        if v is _MISSING:
            continue
        if v is True or v is False:
            tags[i] = _T_BOOL
            bools.append(v)
        elif isinstance(v, int):
            tags[i] = _T_INT
            ints.append(v)
        elif isinstance(v, float):
            tags[i] = _T_FLOAT
            floats.append(v)
        elif isinstance(v, str):
            tags[i] = _T_STR
            strs.append(v.encode("utf-8"))
        else:
            raise ReservoirError(f"unsupported field value {v!r}")
    out.append(bytes(tags))
    out.append(struct.pack("<I", len(ints)))
    out.append(np.asarray(ints, dtype="<i8").tobytes())
    out.append(struct.pack("<I", len(floats)))
    out.append(np.asarray(floats, dtype="<f8").tobytes())
    out.append(struct.pack("<I", len(bools)))
    out.append(np.asarray(bools, dtype="u1").tobytes())
    out.append(struct.pack("<I", len(strs)))
    out.append(np.asarray([len(s) for s in strs], dtype="<u4").tobytes())
    out.append(b"".join(strs))


def encode_block(events: list) -> bytes:
    """Columnar, uncompressed serialization of an event sequence."""
    n = len(events)
    ts = np.fromiter((e.timestamp for e in events), dtype="<i8", count=n)
    ids = np.fromiter((e.ingest_id for e in events), dtype="<i8", count=n)
    names: dict = {}
    for e in events:
        for k in e.fields:
            if k not in names:
                names[k] = None
    out = [struct.pack("<I", n), np.diff(ts, prepend=0).astype("<i8").tobytes(),
           np.diff(ids, prepend=0).astype("<i8").tobytes(), struct.pack("<H", len(names))]
    for name in names:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        _encode_column([e.fields.get(name, _MISSING) for e in events], out)
    return b"".join(out)


def _decode_column(buf, off: int, n: int):
    tags = np.frombuffer(buf, dtype="u1", count=n, offset=off)
    off += n
    cols = {}
    for tag, dtype, size in ((_T_INT, "<i8", 8), (_T_FLOAT, "<f8", 8), (_T_BOOL, "u1", 1)):
        (cnt,) = struct.unpack_from("<I", buf, off)
        off += 4
        arr = np.frombuffer(buf, dtype=dtype, count=cnt, offset=off)
        off += cnt * size
        cols[tag] = arr.astype(bool).tolist() if tag == _T_BOOL else arr.tolist()
    (cnt,) = struct.unpack_from("<I", buf, off)
    off += 4
    lens = np.frombuffer(buf, dtype="<u4", count=cnt, offset=off).tolist()
    off += 4 * cnt
    strs = []
    for ln in lens:
        strs.append(bytes(buf[off:off + ln]).decode("utf-8"))
        off += ln
    cols[_T_STR] = strs
    present = tags != _T_MISSING
    if present.all():
        kinds = np.unique(tags)
        if len(kinds) == 1:
            return cols[int(kinds[0])], off, True
    values = []
    iters = {t: iter(v) for t, v in cols.items()}
    for t in tags.tolist():
        values.append(_MISSING if t == _T_MISSING else next(iters[t]))
    return values, off, bool(present.all())


def decode_block(buf) -> list:
    buf = memoryview(buf)
    (n,) = struct.unpack_from("<I", buf, 0)
    off = 4
    ts = np.cumsum(np.frombuffer(buf, dtype="<i8", count=n, offset=off)).tolist()
    off += 8 * n
    ids = np.cumsum(np.frombuffer(buf, dtype="<i8", count=n, offset=off)).tolist()
    off += 8 * n
    (nf,) = struct.unpack_from("<H", buf, off)
    off += 2
    names, cols, dense = [], [], True
    for _ in range(nf):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        names.append(bytes(buf[off:off + ln]).decode("utf-8"))
        off += ln
        col, off, full = _decode_column(buf, off, n)
        cols.append(col)
        dense = dense and full
    if dense:
        rows = [dict(zip(names, row)) for row in zip(*cols)] if names else [{} for _ in range(n)]
    else:
        rows = [{k: v for k, v in zip(names, row) if v is not _MISSING} for row in zip(*cols)]
    return [_raw_event(t, f, i) for t, f, i in zip(ts, rows, ids)]


def encode_chunk(first_seq: int, events: list) -> bytes:
    if not events:
        raise ReservoirError("a chunk holds at least one event")
    head = _HEADER.pack(CHUNK_MAGIC, CHUNK_VERSION, 0, first_seq)
    body = zlib.compress(encode_block(events), 1)
    tail = _FOOTER_FIELDS.pack(events[0].timestamp, events[-1].timestamp, len(events))
    crc = zlib.crc32(tail, zlib.crc32(body, zlib.crc32(head)))
    return head + body + struct.pack("<I", crc) + tail


@dataclass
class ChunkMeta:
    chunk_id: int
    first_seq: int
    count: int
    min_ts: int
    max_ts: int
    persisted: bool = True

    @property
    def end_seq(self) -> int:
        return self.first_seq + self.count


def verify_chunk(blob: bytes, chunk_id: int) -> ChunkMeta:
    if len(blob) < _HEADER.size + _FOOTER.size:
        raise CorruptChunkError(f"chunk {chunk_id}: truncated ({len(blob)} bytes)")
    magic, version, _flags, first_seq = _HEADER.unpack_from(blob, 0)
    if magic != CHUNK_MAGIC:
        raise CorruptChunkError(f"chunk {chunk_id}: bad magic")
    if version != CHUNK_VERSION:
        raise CorruptChunkError(f"chunk {chunk_id}: unsupported version {version}")
    crc, min_ts, max_ts, count = _FOOTER.unpack_from(blob, len(blob) - _FOOTER.size)
    fields_at = len(blob) - _FOOTER_FIELDS.size
    if zlib.crc32(blob[fields_at:], zlib.crc32(blob[:len(blob) - _FOOTER.size])) != crc:
        raise CorruptChunkError(f"chunk {chunk_id}: checksum mismatch")
    if count <= 0 or min_ts > max_ts:
        raise CorruptChunkError(f"chunk {chunk_id}: inconsistent footer")
    return ChunkMeta(chunk_id, first_seq, count, min_ts, max_ts)


def decode_chunk(blob: bytes, chunk_id: int = -1):
    meta = verify_chunk(blob, chunk_id)
    body = zlib.decompress(blob[_HEADER.size:len(blob) - _FOOTER.size])
    events = decode_block(body)
    if len(events) != meta.count:
        raise CorruptChunkError(f"chunk {chunk_id}: footer count {meta.count} != {len(events)} decoded")
    return meta, events


# ------------------------------------------------------------------ reservoir


_default_pool = None
_pool_lock = threading.Lock()


def default_io_pool() -> ThreadPoolExecutor:
    global _default_pool
    with _pool_lock:
        if _default_pool is None:
            _default_pool = ThreadPoolExecutor(max_workers=2, thread_name_prefix="reservoir-io")
            atexit.register(_default_pool.shutdown, wait=True)
        return _default_pool


@dataclass(frozen=True)
class ReservoirPosition:
    chunk_id: int
    index: int


@dataclass
class ReservoirStats:
    appends: int = 0
    sealed: int = 0
    chunks_written: int = 0
    write_errors: int = 0
    cache_hits: int = 0
    # chunks that had to be read back from disk (by prefetch or on demand)
    cache_misses: int = 0
    # reads where an iterator had to wait for the disk
    blocking_loads: int = 0
    prefetches: int = 0
    evictions: int = 0
    freed: int = 0
    owner_io_ops: int = 0
    resident_high_water: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class IteratorPlan:
    """Iterator boundaries for a set of sliding windows, as lag offsets in ms.

    A boundary at offset ``d`` follows events with ``timestamp <= t - d``.
    ``tails`` end at least one window; ``heads`` only start windows.
    """

    tails: tuple
    heads: tuple

    @property
    def total(self) -> int:
        return len(self.tails) + len(self.heads)


def share_tail(windows) -> IteratorPlan:
    """Windows aligned at an end or a start share that iterator.

    For plain (unlagged) sliding windows this is one shared tail plus one head
    per distinct size.
    """
    sliding = [w for w in windows if w.is_sliding]
    ends = {w.lag_ms for w in sliding}
    starts = {w.lag_ms + w.size_ms for w in sliding}
    return IteratorPlan(tuple(sorted(ends)), tuple(sorted(starts - ends)))


class Reservoir:
    """Chunked event store for one (topic, partition).

    ``cache_capacity`` bounds the number of *unpinned* decoded chunks kept in
    memory; chunks pinned by iterators come on top of it.
    """

    def __init__(self, directory, *, chunk_events: int = 4096, chunk_bytes: int = 1 << 20,
                 cache_capacity: int = 64, prefetch_depth: int = 1, fsync: bool = True,
                 io_pool: ThreadPoolExecutor | None = None):
        if chunk_events < 1:
            raise ValueError("chunk_events must be >= 1")
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.chunk_events = chunk_events
        self.chunk_bytes = chunk_bytes
        self.cache_capacity = cache_capacity
        self.prefetch_depth = prefetch_depth
        self.fsync = fsync
        self._pool = io_pool or default_io_pool()
        self._owner = threading.get_ident()
        self.stats = ReservoirStats()
        self.failure: Exception | None = None

        self._metas: list = []
        self._first_seqs: list = []
        self._open: list = []
        self._open_id = 0
        self._open_first = 0
        self._open_bytes = 0
        self._last_ts = -1
        self._cache: OrderedDict = OrderedDict()
        self._pins: dict = {}
        self._write_buffer: dict = {}
        self._writes: dict = {}
        self._inflight: dict = {}
        self._done: queue.SimpleQueue = queue.SimpleQueue()
        self._iterators: set = set()
        self.recovered_position = self.recover()

    # -- ownership / instrumentation

    def bind_owner(self) -> None:
        """Declare the calling thread as the reservoir's owner."""
        self._owner = threading.get_ident()

    def reset_stats(self) -> None:
        self.stats = ReservoirStats(resident_high_water=len(self._cache))

    def _io(self) -> None:
        if threading.get_ident() == self._owner:
            self.stats.owner_io_ops += 1

    def _path(self, chunk_id: int) -> Path:
        return self.directory / f"{chunk_id:08d}.chk"

    # -- geometry

    @property
    def next_seq(self) -> int:
        return self._open_first + len(self._open)

    @property
    def first_seq(self) -> int:
        return self._metas[0].first_seq if self._metas else self._open_first

    @property
    def open_chunk_id(self) -> int:
        return self._open_id

    @property
    def open_first_seq(self) -> int:
        return self._open_first

    @property
    def last_timestamp(self) -> int:
        return self._last_ts

    @property
    def sealed_chunks(self) -> list:
        return list(self._metas)

    @property
    def resident_chunks(self) -> int:
        return len(self._cache)

    @property
    def pinned_chunks(self) -> int:
        return len(self._pins)

    def __len__(self) -> int:
        return self.next_seq - self.first_seq

    def _meta(self, chunk_id: int) -> ChunkMeta:
        return self._metas[chunk_id - self._metas[0].chunk_id]

    def _chunk_containing(self, seq: int):
        if seq >= self._open_first:
            return self._open_id, self._open_first
        if seq < self.first_seq:
            raise OutOfRetentionError(f"seq {seq} precedes retained range starting at {self.first_seq}")
        i = bisect.bisect_right(self._first_seqs, seq) - 1
        m = self._metas[i]
        return m.chunk_id, m.first_seq

    def locate(self, seq: int) -> ReservoirPosition:
        cid, first = self._chunk_containing(seq)
        return ReservoirPosition(cid, seq - first)

    def seq_of(self, pos: ReservoirPosition) -> int:
        if pos.chunk_id == self._open_id:
            first, count = self._open_first, len(self._open)
        else:
            if not self._metas or pos.chunk_id < self._metas[0].chunk_id:
                raise OutOfRetentionError(f"chunk {pos.chunk_id} not retained")
            m = self._meta(pos.chunk_id)
            first, count = m.first_seq, m.count
        if not 0 <= pos.index <= count:
            raise ValueError(f"index {pos.index} outside chunk {pos.chunk_id}")
        return first + pos.index

    # -- write path

    def append(self, e: Event) -> ReservoirPosition:
        """Add an event; never blocks on disk."""
        if e.timestamp < self._last_ts:
            raise ValueError(f"timestamp {e.timestamp} precedes last appended {self._last_ts}")
        self._drain()
        if len(self._open) >= self.chunk_events or self._open_bytes >= self.chunk_bytes:
            self._seal()
        self._open.append(e)
        self._last_ts = e.timestamp
        size = 24
        for v in e.fields.values():
            size += len(v) + 5 if type(v) is str else 9
        self._open_bytes += size
        self.stats.appends += 1
        return ReservoirPosition(self._open_id, len(self._open) - 1)

    def _seal(self) -> None:
        events = self._open
        cid = self._open_id
        meta = ChunkMeta(cid, self._open_first, len(events), events[0].timestamp, events[-1].timestamp, persisted=False)
        self._metas.append(meta)
        self._first_seqs.append(meta.first_seq)
        self._write_buffer[cid] = events
        self._writes[cid] = self._pool.submit(self._write_job, cid, meta.first_seq, events)
        self._open = []
        self._open_id += 1
        self._open_first = meta.end_seq
        self._open_bytes = 0
        self.stats.sealed += 1

    def seal(self) -> None:
        """Seal the open chunk now, if it holds any events."""
        if self._open:
            self._seal()

    def _write_job(self, cid: int, first_seq: int, events: list) -> None:
        try:
            blob = encode_chunk(first_seq, events)
            path = self._path(cid)
            tmp = path.with_suffix(".tmp")
            self._io()
            with open(tmp, "wb") as fh:
                fh.write(blob)
                if self.fsync:
                    fh.flush()
                    os.fsync(fh.fileno())
            os.replace(tmp, path)
        except Exception as exc:
            log.error("persisting chunk %d failed: %s", cid, exc)
            self._done.put(("persisted", cid, exc))
            raise
        self._done.put(("persisted", cid, None))

    def pending_writes(self) -> list:
        """Futures of chunk writes not yet acknowledged to the owner."""
        return list(self._writes.values())

    def flush(self, timeout: float | None = None) -> None:
        """Wait until every sealed chunk is on disk."""
        for fut in list(self._writes.values()):
            try:
                fut.result(timeout)
            except Exception:
                pass
        self._drain()
        if self.failure is not None:
            raise ReservoirError(f"chunk persistence failed: {self.failure}") from self.failure

    def _drain(self) -> None:
        done = self._done
        while True:
            try:
                item = done.get_nowait()
            except queue.Empty:
                return
            kind, cid = item[0], item[1]
            if kind == "persisted":
                self._writes.pop(cid, None)
                err = item[2]
                if err is not None:
                    self.failure = err
                    self.stats.write_errors += 1
                    continue
                events = self._write_buffer.pop(cid, None)
                if events is None:
                    continue
                if self._metas and cid >= self._metas[0].chunk_id:
                    self._meta(cid).persisted = True
                    if not self._behind_all(cid):
                        self._admit(cid, events)
                self.stats.chunks_written += 1
            else:
                fut = self._inflight.get(cid)
                if fut is not None and fut.done():
                    del self._inflight[cid]
                    if item[3] is None and self._retained(cid):
                        self._admit(cid, item[2])

    def _retained(self, cid: int) -> bool:
        return bool(self._metas) and self._metas[0].chunk_id <= cid < self._open_id

    # -- cache

    def _admit(self, cid: int, events: list) -> None:
        cache = self._cache
        if cid in cache:
            return
        cache[cid] = events
        self._evict()
        if len(cache) > self.stats.resident_high_water:
            self.stats.resident_high_water = len(cache)

    def _evict(self) -> None:
        cache, pins = self._cache, self._pins
        excess = len(cache) - self.cache_capacity
        if excess <= 0:
            return
        excess -= sum(1 for c in cache if c in pins)
        if excess <= 0:
            return
        victims = []
        for c in cache:
            if c not in pins:
                victims.append(c)
                if len(victims) == excess:
                    break
        for c in victims:
            del cache[c]
        self.stats.evictions += len(victims)

    def _load_job(self, cid: int) -> list:
        try:
            self._io()
            blob = self._path(cid).read_bytes()
            meta, events = decode_chunk(blob, cid)
        except Exception as exc:
            self._done.put(("loaded", cid, None, exc))
            raise
        self._done.put(("loaded", cid, events, None))
        return events

    def _submit_load(self, cid: int) -> Future:
        fut = self._pool.submit(self._load_job, cid)
        self._inflight[cid] = fut
        self.stats.cache_misses += 1
        return fut

    def _acquire(self, cid: int) -> list:
        """Pin chunk ``cid`` and return its events, loading it if needed."""
        self._drain()
        pins = self._pins
        if cid == self._open_id:
            pins[cid] = pins.get(cid, 0) + 1
            return self._open
        events = self._cache.get(cid)
        if events is not None:
            self._cache.move_to_end(cid)
            self.stats.cache_hits += 1
        else:
            events = self._write_buffer.get(cid)
            if events is not None:
                self.stats.cache_hits += 1
            else:
                if not self._retained(cid):
                    raise OutOfRetentionError(f"chunk {cid} not retained")
                fut = self._inflight.get(cid)
                if fut is None:
                    fut = self._submit_load(cid)
                if not fut.done():
                    self.stats.blocking_loads += 1
                try:
                    events = fut.result()
                except Exception as exc:
                    self._inflight.pop(cid, None)
                    raise ReservoirError(f"loading chunk {cid} failed: {exc}") from exc
                self._inflight.pop(cid, None)
                pins[cid] = pins.get(cid, 0) + 1
                self._admit(cid, events)
                return events
        pins[cid] = pins.get(cid, 0) + 1
        return events

    def _release(self, cid: int, consumed: bool = True) -> None:
        pins = self._pins
        c = pins.get(cid, 0) - 1
        if c > 0:
            pins[cid] = c
            return
        pins.pop(cid, None)
        if cid in self._cache:
            if consumed and self._behind_all(cid):
                # drop-behind: no cursor will come back to it
                self._cache.move_to_end(cid, last=False)
            self._evict()

    def _behind_all(self, cid: int) -> bool:
        """True when some iterator exists and every iterator has moved past ``cid``."""
        its = self._iterators
        if not its:
            return False
        for it in its:
            c = it._cid
            if c is not None and c <= cid:
                return False
        return True

    def _prefetch_after(self, cid: int) -> None:
        for nxt in range(cid + 1, cid + 1 + self.prefetch_depth):
            if nxt >= self._open_id:
                return
            if nxt in self._cache:
                # about to be read: refresh so LRU does not pick it
                self._cache.move_to_end(nxt)
                continue
            if nxt in self._write_buffer or nxt in self._inflight:
                continue
            self._submit_load(nxt)
            self.stats.prefetches += 1

    # -- read path

    def time_search(self, ts: int) -> int:
        """Sequence number of the first retained event with ``timestamp >= ts``."""
        metas = self._metas
        i = bisect.bisect_left([m.max_ts for m in metas], ts)
        if i < len(metas):
            m = metas[i]
            if m.min_ts >= ts:
                return m.first_seq
            events = self._acquire(m.chunk_id)
            try:
                return m.first_seq + bisect.bisect_left(events, ts, key=_ts)
            finally:
                self._release(m.chunk_id, consumed=False)
        return self._open_first + bisect.bisect_left(self._open, ts, key=_ts)

    def open_iterator(self, role: str = "head", *, time: int | None = None, seq: int | None = None,
                      position: ReservoirPosition | None = None) -> "ReservoirIterator":
        """Open a cursor at an event time, a sequence number or a position.

        With no start the iterator sits one past the newest event.
        """
        if position is not None:
            seq = self.seq_of(position)
        elif time is not None:
            if self.first_seq > 0 and self._metas and time < self._metas[0].min_ts:
                raise OutOfRetentionError(f"time {time} precedes retained data")
            seq = self.time_search(time)
        elif seq is None:
            seq = self.next_seq
        if seq < self.first_seq:
            raise OutOfRetentionError(f"seq {seq} precedes retained range starting at {self.first_seq}")
        if seq > self.next_seq:
            raise ValueError(f"seq {seq} is beyond the end ({self.next_seq})")
        it = ReservoirIterator(self, role, seq)
        self._iterators.add(it)
        return it

    def iterators(self) -> list:
        return list(self._iterators)

    def scan(self, start_seq: int | None = None):
        """Yield every retained event from ``start_seq`` in arrival order."""
        it = self.open_iterator("head", seq=self.first_seq if start_seq is None else start_seq)
        try:
            while (e := it.next()) is not None:
                yield e
        finally:
            it.close()

    # -- retention

    def truncate_before(self, watermark: int) -> int:
        """Drop whole chunks whose newest event is older than ``watermark``."""
        for it in self._iterators:
            e = it.peek()
            if e is not None and e.timestamp < watermark:
                raise ValueError(f"watermark {watermark} is past a live {it.role} iterator at t={e.timestamp}")
        freed = 0
        while self._metas:
            m = self._metas[0]
            if m.max_ts >= watermark or not m.persisted or m.chunk_id in self._pins:
                break
            self._metas.pop(0)
            self._first_seqs.pop(0)
            self._cache.pop(m.chunk_id, None)
            self._pool.submit(self._delete_job, m.chunk_id)
            freed += 1
        self.stats.freed += freed
        return freed

    def _delete_job(self, cid: int) -> None:
        self._io()
        try:
            self._path(cid).unlink()
        except FileNotFoundError:
            pass

    # -- recovery

    def recover(self) -> ReservoirPosition:
        """Rebuild the chunk index from disk.

        A bad or missing final chunk is a torn tail and is dropped; a bad chunk
        followed by a good one raises CorruptChunkError. Returns the position
        just after the last durable event, i.e. the start of the open chunk.
        """
        self._io()
        for tmp in self.directory.glob("*.tmp"):
            tmp.unlink()
        ids = sorted(int(p.stem) for p in self.directory.glob("*.chk") if p.stem.isdigit())
        metas = []
        bad = None
        for pos, cid in enumerate(ids):
            if metas and cid != metas[-1].chunk_id + 1:
                log.warning("chunk %d missing; discarding %d newer chunk files", metas[-1].chunk_id + 1, len(ids) - pos)
                for later in ids[pos:]:
                    self._path(later).unlink()
                break
            try:
                self._io()
                meta = verify_chunk(self._path(cid).read_bytes(), cid)
                if metas and meta.first_seq != metas[-1].end_seq:
                    raise CorruptChunkError(f"chunk {cid}: first_seq {meta.first_seq} != {metas[-1].end_seq}")
            except CorruptChunkError as exc:
                if pos == len(ids) - 1:
                    log.warning("dropping torn final chunk %d: %s", cid, exc)
                    self._path(cid).unlink()
                    break
                bad = exc
                break
            metas.append(meta)
        if bad is not None:
            raise CorruptChunkError(f"interior chunk corruption in {self.directory}: {bad}")
        self._metas = metas
        self._first_seqs = [m.first_seq for m in metas]
        self._cache.clear()
        self._write_buffer.clear()
        self._open = []
        if metas:
            self._open_id = metas[-1].chunk_id + 1
            self._open_first = metas[-1].end_seq
            self._last_ts = metas[-1].max_ts
        else:
            self._open_id = 0
            self._open_first = 0
            self._last_ts = -1
        self._open_bytes = 0
        return ReservoirPosition(self._open_id, 0)

    def reset_to(self, open_chunk_id: int, open_first_seq: int, open_events: list) -> None:
        """Cut the reservoir back to a checkpointed open chunk.

        Chunks numbered ``open_chunk_id`` and above are deleted; the open chunk
        is refilled with ``open_events``. Used when restoring a checkpoint.
        """
        if self._writes or self._iterators:
            raise ReservoirError("reset_to requires an idle reservoir")
        while self._metas and self._metas[-1].chunk_id >= open_chunk_id:
            m = self._metas.pop()
            self._first_seqs.pop()
            self._cache.pop(m.chunk_id, None)
            self._io()
            self._path(m.chunk_id).unlink(missing_ok=True)
        if self._metas:
            last = self._metas[-1]
            if last.chunk_id != open_chunk_id - 1 or last.end_seq != open_first_seq:
                raise ReservoirError(
                    f"checkpoint expects chunk {open_chunk_id - 1} ending at {open_first_seq}, "
                    f"disk has chunk {last.chunk_id} ending at {last.end_seq}")
        self._open = list(open_events)
        self._open_id = open_chunk_id
        self._open_first = open_first_seq
        self._open_bytes = 0
        if self._open:
            self._last_ts = self._open[-1].timestamp
        elif self._metas:
            self._last_ts = self._metas[-1].max_ts
        else:
            self._last_ts = -1

    def close(self) -> None:
        for it in list(self._iterators):
            it.close()
        try:
            self.flush()
        finally:
            for fut in list(self._inflight.values()):
                fut.cancel()

    def abandon(self) -> None:
        """Drop queued I/O and let running I/O settle, without sealing; simulates a crash."""
        futs = list(self._writes.values()) + list(self._inflight.values())
        for fut in futs:
            fut.cancel()
        for fut in futs:
            try:
                fut.result()
            except Exception:
                pass


def _ts(e: Event) -> int:
    return e.timestamp


class ReservoirIterator:
    """Forward cursor over a reservoir; pins the chunk it is positioned in."""

    __slots__ = ("reservoir", "role", "_seq", "_cid", "_first", "_events", "__weakref__")

    def __init__(self, reservoir: Reservoir, role: str, seq: int):
        if role not in ("head", "tail"):
            raise ValueError(f"iterator role must be head or tail, got {role!r}")
        self.reservoir = reservoir
        self.role = role
        self._seq = seq
        self._cid = None
        self._first = 0
        self._events: list = []
        self._bind(seq)

    def _bind(self, seq: int) -> None:
        r = self.reservoir
        cid, first = r._chunk_containing(seq)
        events = r._acquire(cid)
        old = self._cid
        self._cid, self._first, self._events = cid, first, events
        if old is not None:
            r._release(old, consumed=True)
        r._prefetch_after(cid)

    @property
    def seq(self) -> int:
        return self._seq

    @property
    def position(self) -> ReservoirPosition:
        return ReservoirPosition(self._cid, self._seq - self._first)

    @property
    def chunk_id(self) -> int:
        return self._cid

    def peek(self) -> Event | None:
        idx = self._seq - self._first
        ev = self._events
        if idx < len(ev):
            return ev[idx]
        if self._seq >= self.reservoir.next_seq:
            return None
        self._bind(self._seq)
        return self._events[self._seq - self._first]

    def next(self) -> Event | None:
        e = self.peek()
        if e is not None:
            self._seq += 1
        return e

    def __iter__(self):
        return self

    def __next__(self) -> Event:
        e = self.next()
        if e is None:
            raise StopIteration
        return e

    def take_until(self, bound: int) -> list:
        """Consume and return every next event with ``timestamp <= bound``."""
        out = []
        next_seq = self.reservoir.next_seq
        while True:
            ev = self._events
            idx = self._seq - self._first
            n = len(ev)
            j = idx
            while j < n and ev[j].timestamp <= bound:
                j += 1
            if j > idx:
                out += ev[idx:j]
                self._seq += j - idx
            if j < n or self._seq >= next_seq:
                return out
            self._bind(self._seq)

    def close(self) -> None:
        if self._cid is not None:
            self.reservoir._release(self._cid, consumed=False)
            self._cid = None
            self._events = []
        self.reservoir._iterators.discard(self)
