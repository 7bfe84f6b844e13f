import bisect
import random
import time
from concurrent.futures import Future

import pytest
from hypothesis import given, settings, strategies as st

from slidewin.model import Event, WindowSpec
from slidewin.reservoir import (
    CorruptChunkError, OutOfRetentionError, Reservoir, decode_block, decode_chunk, encode_block,
    encode_chunk, share_tail, verify_chunk,
)

values = st.one_of(st.integers(-2**62, 2**62), st.floats(allow_nan=False), st.text(max_size=8), st.booleans())
field_maps = st.dictionaries(st.sampled_from(["a", "b", "card", "amount", "ü"]), values, max_size=4)


@st.composite
def event_lists(draw, max_size=60):
    gaps = draw(st.lists(st.integers(0, 50), max_size=max_size))
    fields = draw(st.lists(field_maps, min_size=len(gaps), max_size=len(gaps)))
    ids = draw(st.lists(st.integers(0, 2**40), min_size=len(gaps), max_size=len(gaps)))
    t = 0
    out = []
    for g, f, i in zip(gaps, fields, ids):
        t += g
        out.append(Event(t, f, i))
    return out


def _events(n, seed=0, step=(0, 20)):
    rng = random.Random(seed)
    t, out = 0, []
    for i in range(n):
        t += rng.randint(*step)
        out.append(Event(t, {"card": f"c{rng.randrange(7)}", "amount": rng.random()}, i))
    return out


@given(event_lists())
def test_block_codec_roundtrip(events):
    assert decode_block(encode_block(events)) == events


@given(event_lists().filter(bool), st.integers(0, 10**6))
def test_chunk_codec_roundtrip_and_checks(events, first_seq):
    blob = encode_chunk(first_seq, events)
    with pytest.raises(Exception):
        encode_chunk(first_seq, [])
    meta = verify_chunk(blob, 3)
    assert (meta.first_seq, meta.count) == (first_seq, len(events))
    assert decode_chunk(blob, 3)[1] == events


@settings(max_examples=30)
@given(event_lists(max_size=30).filter(bool), st.data())
def test_any_single_byte_flip_is_detected(events, data):
    blob = bytearray(encode_chunk(0, events))
    i = data.draw(st.integers(0, len(blob) - 1))
    blob[i] ^= data.draw(st.integers(1, 255))
    with pytest.raises(CorruptChunkError):
        decode_chunk(bytes(blob), 0)


@pytest.fixture
def res(tmp_path):
    r = Reservoir(tmp_path / "r", chunk_events=10, cache_capacity=4, fsync=False)
    yield r
    r.close()


def test_append_scan_and_sealing(res):
    evs = _events(95)
    for e in evs:
        res.append(e)
    assert res.next_seq == 95 and res.open_chunk_id == 9
    assert list(res.scan()) == evs
    assert list(res.scan(42)) == evs[42:]
    res.flush()
    assert res.stats.chunks_written == 9
    with pytest.raises(ValueError):
        res.append(Event(evs[-1].timestamp - 1, {}))


@settings(max_examples=30)
@given(st.integers(1, 120), st.integers(-5, 2500), st.integers(1, 9))
def test_time_search_matches_bisect(tmp_path_factory, n, ts, chunk):
    r = Reservoir(tmp_path_factory.mktemp("r"), chunk_events=chunk, fsync=False)
    evs = _events(n, seed=n)
    for e in evs:
        r.append(e)
    assert r.time_search(ts) == bisect.bisect_left([e.timestamp for e in evs], ts)
    r.close()


@settings(max_examples=30)
@given(st.integers(1, 150), st.lists(st.integers(0, 3000), min_size=1, max_size=8))
def test_take_until_consumes_exactly_the_prefix(tmp_path_factory, n, bounds):
    r = Reservoir(tmp_path_factory.mktemp("r"), chunk_events=7, cache_capacity=2, fsync=False)
    evs = _events(n, seed=n)
    for e in evs:
        r.append(e)
    it = r.open_iterator("head", seq=0)
    got = []
    for b in sorted(bounds):
        got += it.take_until(b)
        assert got == [e for e in evs if e.timestamp <= b]
    it.close()
    r.close()


@settings(max_examples=20)
@given(st.integers(2, 6), st.lists(st.tuples(st.integers(0, 4), st.integers(1, 40)), max_size=40))
def test_cache_never_exceeds_capacity_plus_pins(tmp_path_factory, cap, moves):
    r = Reservoir(tmp_path_factory.mktemp("r"), chunk_events=5, cache_capacity=cap, fsync=False)
    for e in _events(300, seed=cap):
        r.append(e)
    r.flush()
    its = [r.open_iterator("head", seq=s) for s in (0, 60, 120, 180, 240)]
    for who, steps in moves:
        for _ in range(steps):
            its[who].next()
        assert r.resident_chunks <= cap + r.pinned_chunks
    # an iterator crossing a boundary pins the next chunk before releasing its old one
    assert r.stats.resident_high_water <= cap + len(its) + 1
    for it in its:
        it.close()
    r.close()


def test_sequential_reader_hits_prefetched_chunks(tmp_path):
    r = Reservoir(tmp_path, chunk_events=10, cache_capacity=2, fsync=False)
    for e in _events(200):
        r.append(e)
    r.flush()
    r._cache.clear()
    r.reset_stats()
    it = r.open_iterator("head", seq=0)
    n = 0
    for _ in it:
        n += 1
        if n % 10 == 0:
            time.sleep(0.005)                  # a consumer that does some work per chunk
    assert n == 200
    assert r.stats.cache_misses == 19          # every sealed chunk read once
    assert r.stats.prefetches == 18
    assert r.stats.blocking_loads <= 2
    it.close()
    r.close()


def test_truncate_and_retention_errors(res):
    for e in _events(60, step=(1, 1)):
        res.append(e)
    res.flush()
    it = res.open_iterator("tail", seq=35)
    with pytest.raises(ValueError):
        res.truncate_before(40)
    assert res.truncate_before(30) == 2          # chunks holding ts 1..20
    assert res.first_seq == 20
    with pytest.raises(OutOfRetentionError):
        res.open_iterator("head", seq=5)
    with pytest.raises(OutOfRetentionError):
        res.open_iterator("head", time=1)
    it.close()


def test_recover_after_clean_close_and_reset_to(tmp_path):
    evs = _events(47)
    r = Reservoir(tmp_path, chunk_events=10, fsync=False)
    for e in evs:
        r.append(e)
    r.seal()
    r.close()
    r2 = Reservoir(tmp_path, chunk_events=10, fsync=False)
    assert r2.next_seq == 47 and list(r2.scan()) == evs
    r2.reset_to(3, 30, evs[30:33])
    assert r2.next_seq == 33 and list(r2.scan()) == evs[:33]
    assert not (tmp_path / "00000004.chk").exists()
    r2.close()


class InlinePool:
    """Runs jobs on the calling thread, so I/O lands on the owner."""

    def submit(self, fn, *a):
        f = Future()
        try:
            f.set_result(fn(*a))
        except Exception as exc:
            f.set_exception(exc)
        return f


def test_owner_io_instrumentation(tmp_path):
    inline = Reservoir(tmp_path / "a", chunk_events=4, fsync=False, io_pool=InlinePool())
    pooled = Reservoir(tmp_path / "b", chunk_events=4, fsync=False)
    for r in (inline, pooled):
        r.reset_stats()
        for e in _events(40):
            r.append(e)
        r.flush()
    assert inline.stats.owner_io_ops > 0
    assert pooled.stats.owner_io_ops == 0
    inline.close()
    pooled.close()


def test_share_tail_counts():
    assert share_tail([WindowSpec.sliding(60_000), WindowSpec.sliding(300_000)]).total == 3
    assert share_tail([WindowSpec.sliding(60_000)] * 3).total == 2
    assert share_tail([WindowSpec.hopping(60_000, 1_000)]).total == 0


@given(st.lists(st.tuples(st.integers(1, 50), st.integers(0, 50)), min_size=1, max_size=12))
def test_share_tail_is_one_iterator_per_distinct_edge(specs):
    ws = [WindowSpec.sliding(s, lag) for s, lag in specs]
    plan = share_tail(ws)
    edges = {lag for _, lag in specs} | {lag + s for s, lag in specs}
    assert plan.total == len(edges)
    assert set(plan.tails) == {lag for _, lag in specs}
