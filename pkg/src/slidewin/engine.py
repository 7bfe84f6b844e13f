"""Front-end ingestion, processor units and reply collection.

An event for stream ``s`` is appended once to every topic of ``s`` (topic
``"s.<name>"``), on the partition chosen by hashing its routing-key values.
Processor units are threads; each owns a set of task processors, one per
(topic, partition) it was assigned by the consumer group. A task processor
appends the event to its reservoir, runs the plan and writes a reply fragment
to ``"s.replies"``. The reply collector joins fragments by ingest id.

Failure model: a task processor checkpoints its state store together with the
log offset and the reservoir's open chunk. The offset is committed only once
the checkpoint is published. A partition granted to a new owner restores the
newest checkpoint and replays the log from there; replayed reply fragments are
identical and the collector drops them as duplicates.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import queue
import struct
import threading
import time
from collections import OrderedDict, deque
from concurrent.futures import CancelledError, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields as dc_fields
from pathlib import Path

import yaml

from . import _codec
from .messaging import Log, NotAssignedError, Record, TopicPartition
from .model import Event, MetricSpec, StreamConfig, validate_config
from .plan import PlanRunner, build_plan
from .reservoir import Reservoir, decode_block, encode_block
from .state_store import StateStore

log = logging.getLogger(__name__)

REPLY_VERSION = 1
FLAG_CLAMPED = 1
FLAG_REJECTED = 2
REPLIES = "replies"
DEAD_LETTER = "dead-letter"
GROUP_ID = "slidewin"


class SchemaError(ValueError):
    def __init__(self, problems: list):
        super().__init__("; ".join(problems))
        self.problems = problems


class EngineError(Exception):
    pass


# ----------------------------------------------------------------- config


@dataclass
class EngineConfig:
    data_root: str = "./slidewin-data"
    units: int = 1
    cache_capacity: int = 64
    chunk_events: int = 4096
    chunk_bytes: int = 1 << 20
    prefetch_depth: int = 1
    io_workers: int = 2
    checkpoint_events: int = 10_000
    checkpoint_interval_s: float = 10.0
    checkpoints_retained: int = 2
    fsync: bool = True
    fsync_interval_ms: float = 5.0
    fsync_batch: int = 64
    session_timeout_s: float = 10.0
    poll_timeout_s: float = 0.05
    poll_max_records: int = 500
    reply_timeout_s: float = 30.0
    hash_seed: int = 0x5EED

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown engine config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "EngineConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def to_dict(self) -> dict:
        return asdict(self)


def topic_name(stream_id: str, topic: str) -> str:
    return f"{stream_id}.{topic}"


# ---------------------------------------------------------------- routing


def routing_key(fields: dict, keys) -> bytes:
    return _codec.encode_tuple(tuple(fields[k] for k in keys))


def route(fields: dict, keys, partitions: int, seed: int) -> int:
    """Partition for an event: seeded 64-bit blake2b of the routing tuple."""
    digest = hashlib.blake2b(routing_key(fields, keys), digest_size=8,
                             key=seed.to_bytes(8, "little", signed=False)).digest()
    return int.from_bytes(digest, "little") % partitions


# ---------------------------------------------------------------- replies


@dataclass
class ReplyFragment:
    ingest_id: int
    stream_id: str
    values: dict
    event_ts: int
    recv_wall: float
    send_wall: float
    flags: int = 0
    topic: str = ""


_REPLY_HEAD = struct.Struct("<BBQ")
_REPLY_TAIL = struct.Struct("<qdd")


def encode_reply(frag: ReplyFragment) -> bytes:
    out = bytearray(_REPLY_HEAD.pack(REPLY_VERSION, frag.flags, frag.ingest_id))
    _codec.encode_str(frag.stream_id, out)
    out += struct.pack("<H", len(frag.values))
    for mid in sorted(frag.values):
        _codec.encode_str(mid, out)
        _codec.encode_scalar(frag.values[mid], out)
    out += _REPLY_TAIL.pack(frag.event_ts, frag.recv_wall, frag.send_wall)
    return bytes(out)


def decode_reply(buf, topic: str = "") -> ReplyFragment:
    try:
        version, flags, iid = _REPLY_HEAD.unpack_from(buf, 0)
        if version != REPLY_VERSION:
            raise _codec.CodecError(f"unsupported reply version {version}")
        sid, off = _codec.decode_str(buf, _REPLY_HEAD.size)
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        values = {}
        for _ in range(n):
            mid, off = _codec.decode_str(buf, off)
            values[mid], off = _codec.decode_scalar(buf, off)
        ts, recv, send = _REPLY_TAIL.unpack_from(buf, off)
    except struct.error as exc:
        raise _codec.CodecError(f"truncated reply frame: {exc}") from exc
    if off + _REPLY_TAIL.size != len(buf):
        raise _codec.CodecError("trailing bytes after reply frame")
    return ReplyFragment(iid, sid, values, ts, recv, send, flags, topic)


@dataclass
class Response:
    ingest_id: int
    stream_id: str
    values: dict = field(default_factory=dict)
    expected: tuple = ()
    received: dict = field(default_factory=dict)
    complete: bool = False
    missing: tuple = ()
    submitted: float = 0.0
    completed: float | None = None
    flags: int = 0
    _done: threading.Event = field(default_factory=threading.Event, repr=False)

    def wait(self, timeout: float | None = None) -> bool:
        return self._done.wait(timeout)

    @property
    def done(self) -> bool:
        return self._done.is_set()


@dataclass
class CollectorStats:
    fragments: int = 0
    duplicates: int = 0
    unknown: int = 0
    completed: int = 0
    incomplete: int = 0
    malformed: int = 0


class ReplyCollector:
    """Joins reply fragments into client responses on its own thread."""

    def __init__(self, log_: Log, timeout_s: float = 30.0, remember: int = 200_000):
        self.log = log_
        self.timeout_s = timeout_s
        self.remember = remember
        self.stats = CollectorStats()
        self.on_complete = None
        self._pending: dict = {}
        self._finished: OrderedDict = OrderedDict()
        self._positions: dict = {}
        self._lock = threading.Lock()
        self._running = False
        self._thread = None

    def add_stream(self, stream_id: str, from_start: bool = False) -> None:
        tp = TopicPartition(topic_name(stream_id, REPLIES), 0)
        with self._lock:
            if tp not in self._positions:
                self._positions[tp] = 0 if from_start else self.log.next_offset(tp)

    def remove_stream(self, stream_id: str) -> None:
        with self._lock:
            self._positions.pop(TopicPartition(topic_name(stream_id, REPLIES), 0), None)

    def expect(self, ingest_id: int, stream_id: str, topics) -> Response:
        resp = Response(ingest_id, stream_id, expected=tuple(topics), submitted=time.perf_counter())
        with self._lock:
            self._pending[ingest_id] = resp
        return resp

    def start(self) -> None:
        if self._thread is None:
            self._running = True
            self._thread = threading.Thread(target=self._run, name="reply-collector", daemon=True)
            self._thread.start()

    def stop(self) -> None:
        self._running = False
        self.log.wake_all()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def caught_up(self) -> bool:
        with self._lock:
            return all(pos >= self.log.next_offset(tp) for tp, pos in self._positions.items())

    def pending(self) -> int:
        with self._lock:
            return len(self._pending)

    def _run(self) -> None:
        last_sweep = time.monotonic()
        while self._running:
            version = self.log.version
            got = self.poll_once()
            now = time.monotonic()
            if now - last_sweep > 0.1:
                self.expire(now=time.perf_counter())
                last_sweep = now
            if not got:
                self.log.wait_for_data(version, 0.05)

    def poll_once(self, max_records: int = 1000) -> int:
        with self._lock:
            positions = list(self._positions.items())
        got = 0
        for tp, pos in positions:
            recs = self.log.read(tp, pos, max_records)
            for offset, rec in recs:
                self.accept(rec)
            if recs:
                got += len(recs)
                with self._lock:
                    if tp in self._positions:
                        self._positions[tp] = recs[-1][0] + 1
        return got

    def accept(self, rec: Record) -> None:
        topic = rec.key.decode("utf-8", "replace")
        try:
            frag = decode_reply(rec.payload, topic)
        except _codec.CodecError:
            self.stats.malformed += 1
            return
        self.stats.fragments += 1
        done = None
        with self._lock:
            resp = self._pending.get(frag.ingest_id)
            if resp is None:
                if frag.ingest_id in self._finished:
                    self.stats.duplicates += 1
                else:
                    self.stats.unknown += 1
                return
            if topic in resp.received:
                self.stats.duplicates += 1
                return
            resp.received[topic] = frag
            resp.values.update(frag.values)
            resp.flags |= frag.flags
            if set(resp.expected) <= set(resp.received):
                del self._pending[frag.ingest_id]
                self._remember(frag.ingest_id)
                resp.complete = True
                resp.completed = time.perf_counter()
                self.stats.completed += 1
                done = resp
        if done is not None:
            done._done.set()
            if self.on_complete is not None:
                self.on_complete(done)

    def _remember(self, iid: int) -> None:
        self._finished[iid] = None
        while len(self._finished) > self.remember:
            self._finished.popitem(last=False)

    def expire(self, now: float | None = None) -> list:
        """Mark responses older than the timeout incomplete, with their missing topics."""
        now = time.perf_counter() if now is None else now
        out = []
        with self._lock:
            for iid, resp in list(self._pending.items()):
                if now - resp.submitted >= self.timeout_s:
                    del self._pending[iid]
                    self._remember(iid)
                    resp.missing = tuple(t for t in resp.expected if t not in resp.received)
                    resp.completed = now
                    self.stats.incomplete += 1
                    out.append(resp)
        for resp in out:
            resp._done.set()
            if self.on_complete is not None:
                self.on_complete(resp)
        return out


# ---------------------------------------------------------- task processor


@dataclass
class TaskCounters:
    processed: int = 0
    clamped: int = 0
    rejected: int = 0
    dead_lettered: int = 0
    checkpoints: int = 0
    checkpoint_failures: int = 0
    restored_from: int | None = None
    replayed_from: int = 0


def _encode_aux(meta: dict, open_events: list) -> bytes:
    head = json.dumps(meta, sort_keys=True).encode()
    return struct.pack("<I", len(head)) + head + encode_block(open_events)


def _decode_aux(blob: bytes):
    (n,) = struct.unpack_from("<I", blob, 0)
    meta = json.loads(blob[4:4 + n])
    return meta, decode_block(blob[4 + n:])


class TaskProcessor:
    """Reservoir, plan and state store for one (topic, partition). Owner-thread only."""

    def __init__(self, tp: TopicPartition, stream: StreamConfig, topic: str, config: EngineConfig,
                 log_: Log, pool: ThreadPoolExecutor, commit=None):
        self.tp = tp
        self.stream = stream
        self.topic = topic
        self.config = config
        self.log = log_
        self.pool = pool
        self.commit = commit
        self.counters = TaskCounters()
        base = Path(config.data_root) / "tasks" / stream.stream_id / topic / str(tp.partition)
        self.reservoir = Reservoir(base / "chunks", chunk_events=config.chunk_events, chunk_bytes=config.chunk_bytes,
                                   cache_capacity=config.cache_capacity, prefetch_depth=config.prefetch_depth,
                                   fsync=config.fsync, io_pool=pool)
        self.store = StateStore(base, retain=config.checkpoints_retained, fsync=config.fsync)
        self.max_window = stream.largest_window_ms()
        self.next_offset = 0
        self.max_seen = -1
        self._since_cp = 0
        self._last_cp = time.monotonic()
        self._cp_future = None
        self._watermarks: deque = deque(maxlen=max(1, config.checkpoints_retained))
        self.runner: PlanRunner | None = None
        self._reply_tp = TopicPartition(topic_name(stream.stream_id, REPLIES), 0)
        self._dead_tp = TopicPartition(topic_name(stream.stream_id, DEAD_LETTER), 0)
        self._key = tp.topic.encode()

    # -- lifecycle

    def restore(self) -> int:
        """Load the newest checkpoint (or cold start); returns the offset to replay from."""
        metrics = self.stream.metrics_for_topic(self.topic)
        cp = self.store.restore()
        r = self.reservoir
        if cp is None:
            r.reset_to(0, 0, [])
            self.runner = PlanRunner(build_plan(metrics), r, self.store)
            self.next_offset = 0
        else:
            meta, open_events = _decode_aux(cp.aux)
            r.reset_to(meta["open_chunk_id"], meta["open_first_seq"], open_events)
            self.max_seen = meta["max_seen"]
            self.runner = PlanRunner(build_plan(metrics), r, self.store)
            self.runner.restore_positions(meta["positions"])
            self.next_offset = cp.offsets.get(self.tp, 0)
            self.counters.restored_from = cp.checkpoint_id
            self._watermarks.append(meta["watermark"])
        self.counters.replayed_from = self.next_offset
        return self.next_offset

    def close(self, checkpoint: bool = True) -> None:
        """Clean release: final checkpoint, then flush."""
        if checkpoint:
            self.checkpoint(wait=True)
        if self.runner is not None:
            self.runner.close()
        self.reservoir.close()

    def crash(self) -> None:
        """Drop the task processor as a killed process would, after its running I/O settles."""
        if self._cp_future is not None:
            self._cp_future[0].cancel()
            try:
                self._cp_future[0].result()
            except BaseException:
                pass
        self.reservoir.abandon()

    # -- events

    def process_message(self, offset: int, rec: Record) -> None:
        recv = time.time()
        try:
            e = _codec.decode_event(rec.payload)
            problems = self.stream.validate_event(e.fields)
            if problems:
                raise _codec.CodecError("; ".join(problems))
        except _codec.CodecError as exc:
            self._dead_letter(offset, rec, str(exc))
            return
        flags = 0
        values = {}
        ts = e.timestamp
        if ts < self.max_seen:
            if self.max_seen - ts >= self.max_window:
                self.counters.rejected += 1
                flags = FLAG_REJECTED
            else:
                self.counters.clamped += 1
                flags = FLAG_CLAMPED
                e = e.with_timestamp(self.max_seen)
        if not flags & FLAG_REJECTED:
            self.max_seen = e.timestamp
            self.reservoir.append(e)
            values = self.runner.process(e)
        frag = ReplyFragment(e.ingest_id, self.stream.stream_id, values, e.timestamp, recv, time.time(), flags)
        self.log.append(self._reply_tp, Record(self._key, encode_reply(frag)))
        self.next_offset = offset + 1
        self.counters.processed += 1
        self._since_cp += 1

    def _dead_letter(self, offset: int, rec: Record, reason: str) -> None:
        self.counters.dead_lettered += 1
        body = json.dumps({"source": str(self.tp), "offset": offset, "reason": reason}).encode()
        self.log.append(self._dead_tp, Record(body, rec.payload))
        self.next_offset = offset + 1
        self._since_cp += 1

    # -- metrics

    def add_metric(self, metric: MetricSpec, stream: StreamConfig) -> None:
        self.stream = stream
        self.max_window = stream.largest_window_ms()
        self.runner.add_metric(metric)
        self.checkpoint(wait=True)

    def remove_metric(self, metric_id: str, stream: StreamConfig) -> None:
        self.stream = stream
        self.max_window = stream.largest_window_ms()
        self.runner.remove_metric(metric_id)
        self.checkpoint(wait=True)

    # -- checkpoints

    def tick(self) -> None:
        """Finish a completed checkpoint and start a new one when due."""
        self._reap_checkpoint()
        if self._cp_future is not None:
            return
        c = self.config
        if self._since_cp >= c.checkpoint_events or (
                self._since_cp and time.monotonic() - self._last_cp >= c.checkpoint_interval_s):
            self.checkpoint()

    def checkpoint(self, wait: bool = False) -> None:
        if self._cp_future is not None:
            self._cp_future[0].result()
            self._reap_checkpoint()
        r = self.reservoir
        watermark = self.runner.watermark()
        meta = {
            "open_chunk_id": r.open_chunk_id,
            "open_first_seq": r.open_first_seq,
            "max_seen": self.max_seen,
            "positions": self.runner.export_positions(),
            "watermark": watermark,
        }
        open_events = list(r._open)

        def aux():
            return _encode_aux(meta, open_events)

        offset = self.next_offset
        writer = self.store.prepare_snapshot({self.tp: offset}, reservoir_seq=r.next_seq, aux=aux)
        writes = r.pending_writes()
        commit = self.commit
        tp = self.tp

        def job():
            for f in writes:
                f.result()
            cp = writer()
            if commit is not None:
                commit(tp, offset)
            return cp

        self._cp_future = (self.pool.submit(job), watermark)
        self._since_cp = 0
        self._last_cp = time.monotonic()
        if wait:
            try:
                self._cp_future[0].result()
            except Exception:
                pass
            self._reap_checkpoint()

    def _reap_checkpoint(self) -> None:
        if self._cp_future is None or not self._cp_future[0].done():
            return
        fut, watermark = self._cp_future
        self._cp_future = None
        try:
            fut.result()
        except (Exception, CancelledError) as exc:
            self.counters.checkpoint_failures += 1
            log.error("%s: checkpoint failed: %s", self.tp, exc)
            return
        self.counters.checkpoints += 1
        self._watermarks.append(watermark)
        if len(self._watermarks) == self._watermarks.maxlen:
            self.reservoir.truncate_before(min(self._watermarks[0], self.runner.watermark()))

    def states(self) -> dict:
        return dict(self.store.items())


# ----------------------------------------------------------- processor unit


@dataclass
class OperationalTask:
    kind: str
    payload: object = None
    result: object = None
    error: BaseException | None = None
    done: threading.Event = field(default_factory=threading.Event)

    def wait(self, timeout: float | None = None):
        if not self.done.wait(timeout):
            raise TimeoutError(f"operational task {self.kind} not applied within {timeout}s")
        if self.error is not None:
            raise self.error
        return self.result


class ProcessorUnit:
    """One thread running the poll/dispatch loop over its task processors."""

    def __init__(self, unit_id: str, engine: "Engine"):
        self.unit_id = unit_id
        self.engine = engine
        self.tasks: dict = {}
        self.streams: dict = {}
        self.ops: queue.SimpleQueue = queue.SimpleQueue()
        self.member = None
        self.alive = False
        self.fatal: BaseException | None = None
        self._running = False
        self._thread = None

    # -- control

    def start(self) -> None:
        self._running = True
        self.alive = True
        self._thread = threading.Thread(target=self._run, name=f"unit-{self.unit_id}", daemon=True)
        self._thread.start()

    def submit(self, kind: str, payload=None) -> OperationalTask:
        task = OperationalTask(kind, payload)
        self.ops.put(task)
        self.engine.log.wake_all()
        return task

    def stop(self) -> None:
        """Clean shutdown: checkpoint and release every partition, leave the group."""
        self._running = False
        self.engine.log.wake_all()
        if self._thread is not None:
            self._thread.join()
        self.alive = False

    def kill(self) -> None:
        """Abrupt failure: the thread stops without checkpointing or leaving the group.

        The group notices through the missed session deadline.
        """
        self._killed = True
        self._running = False
        self.engine.log.wake_all()
        if self._thread is not None:
            self._thread.join()
        for t in self.tasks.values():
            t.crash()
        self.tasks.clear()
        self.alive = False

    # -- loop

    def _run(self) -> None:
        self._killed = False
        eng = self.engine
        try:
            self._drain_ops()
            self._join()
            while self._running:
                self._drain_ops()
                try:
                    batch = self.member.poll(eng.config.poll_max_records, eng.config.poll_timeout_s)
                except NotAssignedError:
                    log.warning("unit %s lost its group membership; rejoining", self.unit_id)
                    for t in self.tasks.values():
                        t.crash()
                    self.tasks.clear()
                    self._join()
                    continue
                tasks = self.tasks
                for tp, offset, rec in batch:
                    task = tasks.get(tp)
                    if task is None:
                        raise EngineError(f"unit {self.unit_id} received {tp} which it does not own")
                    task.process_message(offset, rec)
                for task in tasks.values():
                    task.tick()
        except BaseException as exc:
            self.fatal = exc
            log.exception("unit %s failed", self.unit_id)
            self._killed = True
        finally:
            if not self._killed:
                self._drain_ops()
                if self.member is not None:
                    self.member.close()
                self.tasks.clear()

    def _join(self) -> None:
        group = self.engine.group
        self.member = group.join(self.unit_id, on_assign=self._on_assign, on_revoke=self._on_revoke)

    def _drain_ops(self) -> None:
        while True:
            try:
                task = self.ops.get_nowait()
            except queue.Empty:
                return
            try:
                task.result = self._apply(task)
            except BaseException as exc:
                task.error = exc
            task.done.set()

    def _apply(self, task: OperationalTask):
        kind, p = task.kind, task.payload
        if kind == "add-stream":
            self.streams[p.stream_id] = p
        elif kind == "remove-stream":
            sid = p
            self.streams.pop(sid, None)
            for tp in [tp for tp, t in self.tasks.items() if t.stream.stream_id == sid]:
                self.tasks.pop(tp).close()
        elif kind in ("add-metric", "remove-metric"):
            stream, arg = p
            self.streams[stream.stream_id] = stream
            for t in self.tasks.values():
                if t.stream.stream_id != stream.stream_id:
                    continue
                if kind == "add-metric":
                    owner = stream.topic_for(arg)
                    if owner is not None and owner.name == t.topic:
                        t.add_metric(arg, stream)
                    else:
                        t.stream = stream
                else:
                    if arg in t.runner.dag.metrics:
                        t.remove_metric(arg, stream)
                    else:
                        t.stream = stream
        elif kind == "assign-partitions":
            self._on_assign(list(p))
        elif kind == "revoke-partitions":
            self._on_revoke(list(p))
        elif kind == "inspect":
            return p(self)
        else:
            raise ValueError(f"unknown operational task {kind!r}")
        return None

    def _on_assign(self, tps: list) -> None:
        for tp in tps:
            if tp in self.tasks:
                continue
            sid, _, topic = tp.topic.rpartition(".")
            stream = self.streams.get(sid)
            if stream is None:
                raise EngineError(f"unit {self.unit_id} granted {tp} of unknown stream {sid!r}")
            task = TaskProcessor(tp, stream, topic, self.engine.config, self.engine.log, self.engine.pool,
                                 commit=self.engine.group.commit)
            offset = task.restore()
            self.member.positions[tp] = offset
            self.tasks[tp] = task

    def _on_revoke(self, tps: list) -> None:
        for tp in tps:
            task = self.tasks.pop(tp, None)
            if task is not None:
                task.close(checkpoint=True)


# ------------------------------------------------------------------- engine


class Engine:
    """Single-process deployment: front-end, ``config.units`` processor units and a reply collector.

    Pass a shared ``log`` to run several engines against one message log, which
    behaves like several nodes of one cluster.
    """

    def __init__(self, config: EngineConfig | None = None, log: Log | None = None, unit_ids=None,
                 name: str = "node"):
        self.config = config or EngineConfig()
        root = Path(self.config.data_root)
        root.mkdir(parents=True, exist_ok=True)
        self._own_log = log is None
        self.log = log or Log(root / "log", fsync_interval_ms=self.config.fsync_interval_ms,
                              fsync_batch=self.config.fsync_batch, fsync=self.config.fsync)
        self.group = self.log.consumer_group(GROUP_ID, session_timeout=self.config.session_timeout_s)
        self.pool = ThreadPoolExecutor(max_workers=self.config.io_workers, thread_name_prefix=f"{name}-io")
        self.collector = ReplyCollector(self.log, self.config.reply_timeout_s)
        self.streams: dict = {}
        ids = unit_ids or [f"{name}-u{i}" for i in range(self.config.units)]
        self.units = {uid: ProcessorUnit(uid, self) for uid in ids}
        self._ids = itertools.count(int(time.time() * 1000) << 20)
        self._id_lock = threading.Lock()
        self._started = False

    # -- lifecycle

    def start(self) -> "Engine":
        if not self._started:
            self._started = True
            self.collector.start()
            for u in self.units.values():
                u.start()
        return self

    def stop(self) -> None:
        for u in self.units.values():
            if u.alive:
                u.stop()
        self.collector.stop()
        self.pool.shutdown(wait=True)
        if self._own_log:
            self.log.close()
        self._started = False

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def live_units(self) -> list:
        return [u for u in self.units.values() if u.alive]

    def kill_unit(self, unit_id: str) -> None:
        self.units[unit_id].kill()

    def check_health(self) -> None:
        for u in self.units.values():
            if u.fatal is not None:
                raise EngineError(f"unit {u.unit_id} failed: {u.fatal!r}") from u.fatal

    def _broadcast(self, kind: str, payload, timeout: float = 30.0) -> list:
        if not self._started:
            for u in self.units.values():
                u.submit(kind, payload)
            return []
        tasks = [u.submit(kind, payload) for u in self.live_units()]
        return [t.wait(timeout) for t in tasks]

    # -- streams and metrics

    def add_stream(self, cfg: StreamConfig, replay_replies: bool = False) -> None:
        problems = validate_config(cfg)
        if problems:
            raise SchemaError(problems)
        for t in cfg.topics:
            name = topic_name(cfg.stream_id, t.name)
            if not self.log.has_topic(name):
                self.log.create_topic(name, t.partitions)
            elif self.log.partition_count(name) != t.partitions:
                raise EngineError(f"topic {name} exists with {self.log.partition_count(name)} partitions")
        for extra in (REPLIES, DEAD_LETTER):
            name = topic_name(cfg.stream_id, extra)
            if not self.log.has_topic(name):
                self.log.create_topic(name, 1)
        self.streams[cfg.stream_id] = cfg
        self.collector.add_stream(cfg.stream_id, from_start=replay_replies)
        self._broadcast("add-stream", cfg)
        self.group.subscribe([topic_name(cfg.stream_id, t.name) for t in cfg.topics])

    def remove_stream(self, stream_id: str) -> None:
        cfg = self.streams.pop(stream_id)
        self.group.unsubscribe([topic_name(stream_id, t.name) for t in cfg.topics])
        self._broadcast("remove-stream", stream_id)
        self.collector.remove_stream(stream_id)

    def add_metric(self, stream_id: str, metric: MetricSpec) -> None:
        cfg = self.streams[stream_id]
        new = StreamConfig(cfg.stream_id, cfg.schema, cfg.metrics + (metric,), cfg.topics)
        problems = validate_config(new)
        if problems:
            raise SchemaError(problems)
        self.streams[stream_id] = new
        self._broadcast("add-metric", (new, metric))

    def remove_metric(self, stream_id: str, metric_id: str) -> None:
        cfg = self.streams[stream_id]
        if metric_id not in {m.metric_id for m in cfg.metrics}:
            raise KeyError(metric_id)
        new = StreamConfig(cfg.stream_id, cfg.schema, tuple(m for m in cfg.metrics if m.metric_id != metric_id),
                           cfg.topics)
        self.streams[stream_id] = new
        self._broadcast("remove-metric", (new, metric_id))

    # -- front-end

    def next_ingest_id(self) -> int:
        with self._id_lock:
            return next(self._ids)

    def ingest(self, stream_id: str, fields: dict, timestamp: int | None = None,
               ingest_id: int | None = None, expect_reply: bool = True) -> Response | int:
        """Validate, route and append an event to every topic of its stream.

        Returns the pending Response (or the ingest id if ``expect_reply`` is off).
        """
        cfg = self.streams.get(stream_id)
        if cfg is None:
            raise KeyError(f"unknown stream {stream_id!r}")
        problems = cfg.validate_event(fields)
        if problems:
            raise SchemaError(problems)
        if timestamp is None:
            timestamp = int(time.time() * 1000)
        iid = self.next_ingest_id() if ingest_id is None else ingest_id
        payload = _codec.encode_event(Event(timestamp, fields, iid))
        topics = [topic_name(stream_id, t.name) for t in cfg.topics]
        resp = self.collector.expect(iid, stream_id, topics) if expect_reply else None
        seed = self.config.hash_seed
        for t, name in zip(cfg.topics, topics):
            key = routing_key(fields, t.routing_keys)
            p = route(fields, t.routing_keys, t.partitions, seed)
            self.log.append(TopicPartition(name, p), Record(key, payload))
        return resp if expect_reply else iid

    # -- introspection

    def inspect(self, fn, timeout: float = 30.0) -> dict:
        """Run ``fn(unit)`` on every live unit's own thread; returns ``{unit_id: result}``."""
        units = self.live_units()
        tasks = [(u.unit_id, u.submit("inspect", fn)) for u in units]
        return {uid: t.wait(timeout) for uid, t in tasks}

    def owned_offsets(self) -> dict:
        res = self.inspect(lambda u: {tp: t.next_offset for tp, t in u.tasks.items()})
        out = {}
        for uid, offs in res.items():
            for tp, off in offs.items():
                if tp in out:
                    raise EngineError(f"{tp} owned by two units")
                out[tp] = off
        return out

    def wait_idle(self, timeout: float = 60.0, units_expected=None) -> None:
        """Block until every data partition is owned and fully processed and replies are collected."""
        deadline = time.monotonic() + timeout
        while True:
            self.check_health()
            tps = [TopicPartition(topic_name(sid, t.name), i)
                   for sid, cfg in self.streams.items() for t in cfg.topics for i in range(t.partitions)]
            offs = self.owned_offsets()
            if all(tp in offs and offs[tp] >= self.log.next_offset(tp) for tp in tps) and self.collector.caught_up():
                return
            if time.monotonic() > deadline:
                missing = [str(tp) for tp in tps if tp not in offs]
                raise TimeoutError(f"engine not idle after {timeout}s; unowned: {missing[:10]}")
            time.sleep(0.02)

    def states(self) -> dict:
        """``{(topic, partition): {state_key: state}}`` across live units."""
        res = self.inspect(lambda u: {tp: t.states() for tp, t in u.tasks.items()})
        out = {}
        for d in res.values():
            out.update(d)
        return out

    def task_counters(self) -> dict:
        res = self.inspect(lambda u: {tp: asdict(t.counters) for tp, t in u.tasks.items()})
        out = {}
        for d in res.values():
            out.update(d)
        return out

    def reservoir_stats(self, reset: bool = False) -> dict:
        def grab(u):
            out = {}
            for tp, t in u.tasks.items():
                out[tp] = t.reservoir.stats.as_dict()
                if reset:
                    t.reservoir.reset_stats()
            return out

        res = self.inspect(grab)
        out = {}
        for d in res.values():
            out.update(d)
        return out

    def read_replies(self, stream_id: str) -> list:
        """Every reply fragment on the stream's reply topic, including duplicates, in log order."""
        tp = TopicPartition(topic_name(stream_id, REPLIES), 0)
        return [decode_reply(rec.payload, rec.key.decode()) for _, rec in self.log.read(tp, 0)]
