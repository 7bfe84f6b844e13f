"""Embedded partitioned append-only log with pull-based consumer groups.

Layout under the log root::

    <root>/<topic>/<partition>/segment.log
    <root>/<topic>/<partition>/committed/<group_id>     (8-byte LE offset)

Each record in ``segment.log`` is framed as
``[payload length u32 LE][crc32(payload) u32 LE][key length u16 LE][key][payload]``.
The offset -> file position index is rebuilt by scanning on open; a torn final
frame is cut off.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

log = logging.getLogger(__name__)

_FRAME = struct.Struct("<IIH")


class MessagingError(Exception):
    pass


class DuplicateTopicError(MessagingError):
    pass


class UnknownTopicError(MessagingError):
    pass


class OffsetOutOfRangeError(MessagingError):
    pass


class CommitRegressionError(MessagingError):
    pass


class NotAssignedError(MessagingError):
    pass


class TopicPartition(NamedTuple):
    topic: str
    partition: int

    def __str__(self):
        return f"{self.topic}[{self.partition}]"


@dataclass(frozen=True)
class Record:
    key: bytes
    payload: bytes
    append_time: float | None = None

    def __post_init__(self):
        if not self.payload:
            raise ValueError("record payload must be non-empty")


class Offset(int):
    """Dense, non-negative per-partition sequence number."""

    def __new__(cls, value: int):
        if value < 0:
            raise ValueError("offsets are non-negative")
        return super().__new__(cls, value)


def encode_frame(rec: Record) -> bytes:
    return _FRAME.pack(len(rec.payload), zlib.crc32(rec.payload), len(rec.key)) + rec.key + rec.payload


class Partition:
    """One append-only segment file plus its in-memory offset index."""

    def __init__(self, directory: Path):
        self.directory = directory
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "committed").mkdir(exist_ok=True)
        self.path = directory / "segment.log"
        self._lock = threading.Lock()
        self._positions: list = []
        self._times: list = []
        self._end = 0
        self._unsynced = 0
        self._scan()
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT | os.O_APPEND, 0o644)

    def _scan(self) -> None:
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        pos = 0
        while pos + _FRAME.size <= len(data):
            plen, crc, klen = _FRAME.unpack_from(data, pos)
            end = pos + _FRAME.size + klen + plen
            if end > len(data):
                break
            payload = data[end - plen:end]
            if zlib.crc32(payload) != crc:
                break
            self._positions.append(pos)
            self._times.append(None)
            pos = end
        if pos != len(data):
            log.warning("truncating torn tail of %s at byte %d (file had %d)", self.path, pos, len(data))
            with open(self.path, "r+b") as fh:
                fh.truncate(pos)
        self._end = pos

    @property
    def next_offset(self) -> int:
        return len(self._positions)

    def append(self, rec: Record) -> int:
        frame = encode_frame(rec)
        with self._lock:
            os.write(self._fd, frame)
            offset = len(self._positions)
            self._positions.append(self._end)
            self._times.append(rec.append_time if rec.append_time is not None else time.time())
            self._end += len(frame)
            self._unsynced += 1
            return offset

    def sync(self) -> None:
        with self._lock:
            if not self._unsynced:
                return
            self._unsynced = 0
        os.fsync(self._fd)

    @property
    def unsynced(self) -> int:
        return self._unsynced

    def read(self, start: int, max_records: int) -> list:
        """Records ``[start, start + max_records)`` as ``(offset, Record)`` pairs."""
        with self._lock:
            stop = min(len(self._positions), start + max_records)
            if start >= stop:
                return []
            lo = self._positions[start]
            hi = self._positions[stop] if stop < len(self._positions) else self._end
            times = self._times[start:stop]
        data = os.pread(self._fd, hi - lo, lo)
        out = []
        pos = 0
        for i in range(stop - start):
            plen, crc, klen = _FRAME.unpack_from(data, pos)
            kstart = pos + _FRAME.size
            key = data[kstart:kstart + klen]
            payload = data[kstart + klen:kstart + klen + plen]
            pos = kstart + klen + plen
            out.append((start + i, Record(key, payload, times[i])))
        return out

    def read_committed(self, group_id: str) -> int | None:
        p = self.directory / "committed" / group_id
        try:
            raw = p.read_bytes()
        except FileNotFoundError:
            return None
        if len(raw) != 8:
            return None
        return struct.unpack("<Q", raw)[0]

    def write_committed(self, group_id: str, offset: int, fsync: bool) -> None:
        p = self.directory / "committed" / group_id
        tmp = p.with_name(p.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(struct.pack("<Q", offset))
            if fsync:
                fh.flush()
                os.fsync(fh.fileno())
        os.replace(tmp, p)

    def close(self) -> None:
        self.sync()
        os.close(self._fd)


class Log:
    """The durable message log shared by producers and consumer groups.

    Appends are serialized per partition. A background flusher fsyncs dirty
    partitions every ``fsync_interval_ms`` or as soon as ``fsync_batch``
    records accumulate on one partition.
    """

    def __init__(self, root, *, fsync_interval_ms: float = 5.0, fsync_batch: int = 64, fsync: bool = True):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fsync_enabled = fsync
        self.fsync_interval = fsync_interval_ms / 1000.0
        self.fsync_batch = fsync_batch
        self._topics: dict = {}
        self._groups: dict = {}
        self._lock = threading.Lock()
        self._data = threading.Condition(threading.Lock())
        self._version = 0
        self._closed = False
        self._flush_wanted = threading.Event()
        for tdir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            parts = sorted(int(p.name) for p in tdir.iterdir() if p.name.isdigit())
            if parts and parts == list(range(len(parts))):
                self._topics[tdir.name] = [Partition(tdir / str(i)) for i in parts]
        self._flusher = None
        if fsync:
            self._flusher = threading.Thread(target=self._flush_loop, name="log-flusher", daemon=True)
            self._flusher.start()

    def create_topic(self, name: str, partition_count: int) -> list:
        if partition_count < 1:
            raise ValueError("partition_count must be >= 1")
        if not name or "/" in name or name.startswith("."):
            raise ValueError(f"invalid topic name {name!r}")
        with self._lock:
            if name in self._topics:
                raise DuplicateTopicError(name)
            parts = [Partition(self.root / name / str(i)) for i in range(partition_count)]
            self._topics[name] = parts
        return [TopicPartition(name, i) for i in range(partition_count)]

    def has_topic(self, name: str) -> bool:
        return name in self._topics

    def topics(self) -> dict:
        return {name: len(parts) for name, parts in self._topics.items()}

    def partition_count(self, topic: str) -> int:
        return len(self._partitions(topic))

    def _partitions(self, topic: str) -> list:
        try:
            return self._topics[topic]
        except KeyError:
            raise UnknownTopicError(topic) from None

    def _partition(self, tp: TopicPartition) -> Partition:
        parts = self._partitions(tp.topic)
        if not 0 <= tp.partition < len(parts):
            raise UnknownTopicError(f"{tp}: no such partition")
        return parts[tp.partition]

    def append(self, tp: TopicPartition, rec: Record) -> Offset:
        part = self._partition(tp)
        try:
            offset = part.append(rec)
        except OSError as exc:
            raise MessagingError(f"storage failure appending to {tp}: {exc}") from exc
        if part.unsynced >= self.fsync_batch:
            self._flush_wanted.set()
        with self._data:
            self._version += 1
            self._data.notify_all()
        return Offset(offset)

    def next_offset(self, tp: TopicPartition) -> int:
        return self._partition(tp).next_offset

    def read(self, tp: TopicPartition, start: int, max_records: int = 1 << 30) -> list:
        return self._partition(tp).read(start, max_records)

    def wait_for_data(self, seen_version: int, timeout: float) -> int:
        with self._data:
            if self._version == seen_version and timeout > 0:
                self._data.wait(timeout)
            return self._version

    @property
    def version(self) -> int:
        return self._version

    def wake_all(self) -> None:
        with self._data:
            self._version += 1
            self._data.notify_all()

    def _flush_loop(self) -> None:
        while not self._closed:
            self._flush_wanted.wait(self.fsync_interval)
            self._flush_wanted.clear()
            self.flush()

    def flush(self) -> None:
        for parts in list(self._topics.values()):
            for p in parts:
                try:
                    p.sync()
                except OSError as exc:
                    log.error("fsync failed for %s: %s", p.path, exc)

    def consumer_group(self, group_id: str, topics=(), *, session_timeout: float = 10.0) -> "ConsumerGroup":
        with self._lock:
            g = self._groups.get(group_id)
            if g is None:
                g = self._groups[group_id] = ConsumerGroup(self, group_id, session_timeout)
        if topics:
            g.subscribe(topics)
        return g

    def read_committed(self, group_id: str, tp: TopicPartition) -> int | None:
        return self._partition(tp).read_committed(group_id)

    def close(self) -> None:
        self._closed = True
        self._flush_wanted.set()
        if self._flusher is not None:
            self._flusher.join(timeout=1.0)
        for parts in self._topics.values():
            for p in parts:
                p.close()
        self.wake_all()


@dataclass
class AssignmentDelta:
    revoked: list = field(default_factory=list)
    granted: list = field(default_factory=list)


class ConsumerGroup:
    """Membership, partition assignment and committed offsets for one group.

    Assignment is round-robin over ``(topic, partition)`` pairs sorted
    lexicographically, dealt to members sorted by id. A partition moved between
    members is only granted to the new owner after the old owner has
    acknowledged the revoke (or died), so no two live members ever hold it.
    """

    def __init__(self, log_: Log, group_id: str, session_timeout: float):
        self.log = log_
        self.group_id = group_id
        self.session_timeout = session_timeout
        self.topics: list = []
        self.members: dict = {}
        self.assignment: dict = {}
        self.held: dict = {}
        self.generation = 0
        self._lock = threading.RLock()

    def subscribe(self, topics) -> None:
        with self._lock:
            changed = False
            for t in topics:
                if t not in self.topics:
                    self.topics.append(t)
                    changed = True
            if changed:
                self._rebalance_locked()

    def unsubscribe(self, topics) -> None:
        with self._lock:
            self.topics = [t for t in self.topics if t not in set(topics)]
            self._rebalance_locked()

    def join(self, member_id: str, *, on_assign: Callable | None = None, on_revoke: Callable | None = None) -> "GroupMember":
        with self._lock:
            if member_id in self.members and self.members[member_id].alive:
                raise MessagingError(f"member {member_id!r} already joined")
            m = GroupMember(self, member_id, on_assign, on_revoke)
            self.members[member_id] = m
            self._rebalance_locked()
            return m

    def leave(self, member_id: str) -> None:
        """Remove a member (clean shutdown or detected failure) and rebalance."""
        with self._lock:
            m = self.members.get(member_id)
            if m is None or not m.alive:
                return
            m.alive = False
            for tp, holder in list(self.held.items()):
                if holder == member_id:
                    del self.held[tp]
            self._rebalance_locked()
        self.log.wake_all()

    def live_members(self) -> list:
        return sorted(mid for mid, m in self.members.items() if m.alive)

    def all_partitions(self) -> list:
        tps = []
        for t in self.topics:
            if self.log.has_topic(t):
                tps.extend(TopicPartition(t, i) for i in range(self.log.partition_count(t)))
        return sorted(tps)

    def rebalance(self, live_members=None) -> dict:
        """Recompute the assignment; returns the delta per member."""
        with self._lock:
            if live_members is not None:
                live = set(live_members)
                for mid, m in self.members.items():
                    if m.alive and mid not in live:
                        m.alive = False
                        for tp, holder in list(self.held.items()):
                            if holder == mid:
                                del self.held[tp]
            return self._rebalance_locked()

    def _rebalance_locked(self) -> dict:
        live = self.live_members()
        new = {}
        if live:
            for i, tp in enumerate(self.all_partitions()):
                new[tp] = live[i % len(live)]
        deltas = {mid: AssignmentDelta() for mid in live}
        for mid in live:
            before = {tp for tp, o in self.assignment.items() if o == mid}
            after = {tp for tp, o in new.items() if o == mid}
            deltas[mid].revoked = sorted(before - after)
            deltas[mid].granted = sorted(after - before)
        self.assignment = new
        self.generation += 1
        for mid in live:
            self.members[mid]._target = {tp for tp, o in new.items() if o == mid}
        return deltas

    def check_sessions(self, now: float | None = None) -> None:
        now = time.monotonic() if now is None else now
        expired = []
        with self._lock:
            for mid, m in self.members.items():
                if m.alive and now - m.last_seen > self.session_timeout:
                    expired.append(mid)
        for mid in expired:
            log.warning("group %s: member %s missed its session deadline, evicting", self.group_id, mid)
            self.leave(mid)

    def committed(self, tp: TopicPartition) -> int | None:
        return self.log.read_committed(self.group_id, tp)

    def commit(self, tp: TopicPartition, offset: int) -> None:
        with self._lock:
            nxt = self.log.next_offset(tp)
            if not 0 <= offset <= nxt:
                raise OffsetOutOfRangeError(f"{tp}: commit {offset} outside [0, {nxt}]")
            prev = self.committed(tp)
            if prev is not None and offset < prev:
                raise CommitRegressionError(f"{tp}: commit {offset} < committed {prev}")
            self.log._partition(tp).write_committed(self.group_id, offset, self.log.fsync_enabled)


class GroupMember:
    """A consumer in a group. Not thread-safe: one thread polls a member."""

    def __init__(self, group: ConsumerGroup, member_id: str, on_assign, on_revoke):
        self.group = group
        self.member_id = member_id
        self.on_assign = on_assign
        self.on_revoke = on_revoke
        self.alive = True
        self.last_seen = time.monotonic()
        self.owned: list = []
        self._target: set = set()
        self.positions: dict = {}
        self._cursor = 0

    @property
    def log(self) -> Log:
        return self.group.log

    def _sync_assignment(self) -> None:
        g = self.group
        with g._lock:
            if not self.alive:
                raise NotAssignedError(f"member {self.member_id} has left the group")
            target = self._target
            revoked = [tp for tp in self.owned if tp not in target]
        if revoked:
            if self.on_revoke is not None:
                self.on_revoke(revoked)
            with g._lock:
                for tp in revoked:
                    if g.held.get(tp) == self.member_id:
                        del g.held[tp]
                    self.positions.pop(tp, None)
                self.owned = [tp for tp in self.owned if tp not in revoked]
        with g._lock:
            if not self.alive:
                return
            granted = [tp for tp in sorted(self._target) if tp not in self.owned and tp not in g.held]
            for tp in granted:
                g.held[tp] = self.member_id
        if granted:
            for tp in granted:
                committed = g.committed(tp)
                self.positions[tp] = committed if committed is not None else 0
            self.owned = sorted(self.owned + granted)
            if self.on_assign is not None:
                self.on_assign(granted)

    def heartbeat(self) -> None:
        self.last_seen = time.monotonic()
        self.group.check_sessions(self.last_seen)

    def poll(self, max_records: int = 500, timeout: float = 0.1) -> list:
        """Return up to ``max_records`` ``(tp, offset, Record)`` triples.

        Blocks up to ``timeout`` seconds and returns early once any record is
        available. Rebalance callbacks run here, before new data is returned.
        """
        deadline = time.monotonic() + timeout
        while True:
            self.heartbeat()
            self._sync_assignment()
            version = self.log.version
            out = self._fetch(max_records)
            if out:
                return out
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return []
            self.log.wait_for_data(version, min(remaining, 0.05))

    def _fetch(self, max_records: int) -> list:
        owned = self.owned
        if not owned:
            return []
        out = []
        n = len(owned)
        for i in range(n):
            tp = owned[(self._cursor + i) % n]
            pos = self.positions[tp]
            if pos >= self.log.next_offset(tp):
                continue
            for offset, rec in self.log.read(tp, pos, max_records - len(out)):
                out.append((tp, offset, rec))
            self.positions[tp] = out[-1][1] + 1
            if len(out) >= max_records:
                self._cursor = (self._cursor + i + 1) % n
                break
        else:
            self._cursor = (self._cursor + 1) % n
        return out

    def position(self, tp: TopicPartition) -> int:
        return self.positions[tp]

    def seek(self, tp: TopicPartition, offset: int) -> None:
        if tp not in self.positions:
            raise NotAssignedError(f"{tp} not owned by {self.member_id}")
        nxt = self.log.next_offset(tp)
        if not 0 <= offset <= nxt:
            raise OffsetOutOfRangeError(f"{tp}: seek {offset} outside [0, {nxt}]")
        self.positions[tp] = offset

    def commit(self, tp: TopicPartition, offset: int) -> None:
        self.group.commit(tp, offset)

    def close(self) -> None:
        """Leave the group cleanly, revoking everything first."""
        if not self.alive:
            return
        if self.owned and self.on_revoke is not None:
            self.on_revoke(list(self.owned))
        self.owned = []
        self.group.leave(self.member_id)
