"""Acceptance suite: one PASS/FAIL line per criterion, printed in the pytest summary.

Run alone with ``pytest tests/test_acceptance.py -v``; the long benchmark-based
criteria are marked ``slow`` and can be skipped with ``-m "not slow"``.
"""

import math
import random
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from harness import LocalRun, run_stream
from oracles import hop_max_count, sliding_per_event, sliding_vectorized
from slidewin import MINUTE, SECOND, HOUR, MetricSpec, WindowSpec
from slidewin.bench import (
    DatasetConfig, InjectorConfig, bench_stream, default_metrics, misaligned_windows, run_injection,
    sweep_iterators, sweep_windows,
)
from slidewin.engine import Engine, EngineConfig
from slidewin.plan import build_plan
from slidewin.reservoir import CorruptChunkError, Reservoir, decode_block, encode_block, share_tail
from slidewin.model import Event

RESULTS: list = []


def verdict(label: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def bench_engine(tmp_path, **kw) -> EngineConfig:
    base = dict(data_root=str(tmp_path / "data"), fsync=False, units=1)
    base.update(kw)
    return EngineConfig(**base)


# ----------------------------------------------------------------------- 1


def test_01_burst_accuracy(tmp_path):
    t0 = time.perf_counter()
    stream = [(s * SECOND, {"card": "c1"}) for s in (50, 120, 180, 240, 345)]
    metrics = [
        MetricSpec("sliding", WindowSpec.sliding(5 * MINUTE), ("card",), "count"),
        MetricSpec("hopping", WindowSpec.hopping(5 * MINUTE, MINUTE), ("card",), "count"),
    ]
    lr = LocalRun(metrics, tmp_path / "r")
    lr.runner.keep_hop_finals = True
    replies = lr.run(stream)
    hop_values = [h.value for h in lr.runner.hop_finals + lr.runner.hopping_values() if h.metric_id == "hopping"]
    lr.close()
    sliding = replies[-1]["sliding"]
    engine_hop_max = max(hop_values)
    brute_hop_max = hop_max_count(stream, 5 * MINUTE, MINUTE)
    elapsed = time.perf_counter() - t0
    ok = sliding == 5 and engine_hop_max == 4 and brute_hop_max == 4 and elapsed < 1.0
    verdict("#1 burst accuracy", ok,
            f"sliding count={sliding} (want 5), hop max engine={engine_hop_max} brute={brute_hop_max} "
            f"(want 4), {elapsed * 1000:.0f} ms")


# ----------------------------------------------------------------------- 2


def _random_case(seed: int):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10_000, 50_001))
    keys = int(rng.integers(1, 201))
    size = int(round(math.exp(rng.uniform(math.log(SECOND), math.log(HOUR)))))
    # mean window occupancy between 20 and 2000 events
    gap = size / rng.uniform(20, 2000)
    ts = np.cumsum(np.floor(rng.exponential(gap, n))).astype(np.int64)
    groups = rng.zipf(1.3, n) % keys
    cents = rng.integers(1, 100_000, n)
    codes = rng.integers(0, int(rng.integers(1, 40)), n)
    flag = rng.random(n) < 0.6
    filtered = seed % 2 == 1
    threshold = 25_000
    keep = (flag & (cents >= threshold)) if filtered else np.ones(n, dtype=bool)
    filt = [["flag", "=", True], ["amount", ">=", threshold / 100]] if filtered else None
    stream = [(int(ts[i]), {"k": int(groups[i]), "m": int(codes[i]), "amount": int(cents[i]) / 100,
                            "flag": bool(flag[i])}) for i in range(n)]
    metrics = [MetricSpec(kind, WindowSpec.sliding(size), ("k",), agg, filt) for kind, agg in
               (("count", "count(*)"), ("sum", "sum(amount)"), ("avg", "avg(amount)"),
                ("distinct_count", "distinct_count(m)"))]
    return stream, metrics, (ts, groups, cents, codes, keep, size)


def _compare(replies, ref_arrays):
    ts, groups, cents, codes, keep, size = ref_arrays
    bad = 0
    for kind in ("count", "sum", "avg", "distinct_count"):
        vals = codes if kind == "distinct_count" else cents
        ref = sliding_vectorized(ts, groups, vals, keep, size, kind)
        got = np.array([np.nan if r[kind] is None else r[kind] for r in replies], dtype=float)
        if kind in ("count", "distinct_count"):
            bad += int((got != ref).sum())
        else:
            both_nan = np.isnan(got) & np.isnan(ref)
            close = np.abs(got - ref) <= 1e-9 * np.maximum(np.abs(ref), 1e-300)
            bad += int((~(both_nan | close)).sum())
    return bad


@pytest.mark.slow
def test_02_oracle_equivalence(tmp_path):
    t0 = time.perf_counter()
    events = mismatches = 0
    for seed in range(100):
        stream, metrics, ref = _random_case(seed)
        d = tmp_path / f"case{seed}"
        replies = run_stream(metrics, stream, d, chunk_events=1024)
        shutil.rmtree(d, ignore_errors=True)
        mismatches += _compare(replies, ref)
        events += len(stream)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 300
    verdict("#2 oracle equivalence", ok,
            f"100 streams, {events} events x 4 aggregations, {mismatches} mismatches, {elapsed:.0f} s (limit 300 s)")


# ----------------------------------------------------------------------- 3


def test_03_hopping_state_count_law(tmp_path):
    found = {}
    ok = True
    for size, hop in ((300 * SECOND, 60 * SECOND), (60 * SECOND, SECOND), (60 * SECOND, 60 * SECOND)):
        metric = MetricSpec("c", WindowSpec.hopping(size, hop), ("card",), "count")
        lr = LocalRun([metric], tmp_path / f"h{size}-{hop}")
        hs = next(iter(lr.runner.hopping.values()))
        rng = random.Random(size + hop)
        t = 0
        counts = set()
        while t < 3 * size:
            t += rng.randrange(1, 700)
            lr.push(t, {"card": f"c{rng.randrange(5)}"})
            if t >= size:
                counts.add(hs.live_windows)
                starts = {k[1][0] for k in lr.store.keys()}
                ok &= len(starts) <= size // hop
        lr.close()
        found[(size // SECOND, hop // SECOND)] = sorted(counts)
        ok &= counts == {size // hop}
    verdict("#3 hopping state-count law", ok,
            ", ".join(f"(w={w}s,s={s}s) live={c}" for (w, s), c in found.items()) + " (want 5, 60, 1)")


# ----------------------------------------------------------------------- 4


def test_04_hop_to_sliding_limit(tmp_path):
    mismatches = 0
    instances = 0
    for seed in range(8):
        rng = random.Random(seed)
        size = rng.choice([5, 30, 120]) * SECOND
        t = 0
        stream = []
        for _ in range(1000):
            t += rng.choice([0, 0, 1, 1, 2, 5]) * SECOND
            stream.append((t, {"card": f"c{rng.randrange(20)}", "amount": rng.randrange(1, 10_000) / 100,
                               "m": rng.randrange(7)}))
        metrics = []
        for agg in ("count(*)", "sum(amount)", "avg(amount)", "distinct_count(m)"):
            kind = agg.split("(")[0]
            metrics.append(MetricSpec(f"slide_{kind}", WindowSpec.sliding(size), ("card",), agg))
            metrics.append(MetricSpec(f"hop_{kind}", WindowSpec.hopping(size, SECOND), ("card",), agg))
        replies = run_stream(metrics, stream, tmp_path / f"s{seed}")
        for kind in ("count", "sum", "avg", "distinct_count"):
            field = None if kind == "count" else ("m" if kind == "distinct_count" else "amount")
            ref = sliding_per_event(stream, size, ("card",), kind, field)
            for r, want in zip(replies, ref):
                mismatches += r[f"hop_{kind}"] != r[f"slide_{kind}"]
                mismatches += r[f"slide_{kind}"] != want and not math.isclose(r[f"slide_{kind}"], want, rel_tol=1e-9)
        instances += 1
    verdict("#4 hop->sliding limit", mismatches == 0,
            f"{instances} x 1000-event integer-second streams, 4 aggregations, {mismatches} mismatches")


# ----------------------------------------------------------------------- 5


@pytest.mark.slow
def test_05_window_size_independence(tmp_path):
    t0 = time.perf_counter()
    cfg = InjectorConfig(throughput=200, duration_s=45, warmup_s=10, seed=5)
    results = sweep_windows(cfg, bench_engine(tmp_path), sizes=(MINUTE, HOUR, 24 * HOUR))
    hw = [r.resident_high_water for r, _ in results]
    p99 = [r.percentiles[99.0] for r, _ in results]
    spread = max(p99) / min(p99)
    elapsed = time.perf_counter() - t0
    ok = len(set(hw)) == 1 and spread <= 2.0 and all(r.valid for r, _ in results) and elapsed <= 600
    verdict("#5 window-size independence", ok,
            f"sizes 1min/1h/24h: resident high-water {hw}, p99 ms {[round(p, 2) for p in p99]}, "
            f"spread {spread:.2f}x (limit 2x), {elapsed:.0f} s")


# ----------------------------------------------------------------------- 6


@pytest.mark.slow
def test_06_iterator_cache_degradation(tmp_path):
    cfg = InjectorConfig(throughput=250, duration_s=20, warmup_s=5, seed=6)
    (r10, _), (r40, _) = sweep_iterators(cfg, bench_engine(tmp_path), window_counts=(10, 40), cache_capacity=32)
    ok = (r10.iterators < 32 and r10.cache_misses == 0 and r40.iterators > 64 and r40.cache_misses > 0
          and r40.percentiles[99.0] > r10.percentiles[99.0])
    verdict("#6 iterator/cache degradation", ok,
            f"C=32: 10 windows -> {r10.iterators} iterators, {r10.cache_misses} misses, p99 "
            f"{r10.percentiles[99.0]:.1f} ms; 40 windows -> {r40.iterators} iterators, {r40.cache_misses} misses, "
            f"p99 {r40.percentiles[99.0]:.1f} ms")


# ----------------------------------------------------------------------- 7


def _recovery_events(n: int, seed: int) -> list:
    rng = random.Random(seed)
    t = 1_000_000
    out = []
    for i in range(n):
        t += rng.randrange(0, 200)
        out.append((i + 1, t, {"card": f"card{int(rng.paretovariate(1.1)) % 300}",
                               "merchant": f"m{rng.randrange(40)}",
                               "amount": rng.randrange(1, 500_000) / 100}))
    return out


def _recovery_run(payments_stream, root: Path, events, kill_at=None):
    ec = EngineConfig(data_root=str(root), units=2, fsync=False, chunk_events=512, checkpoint_events=1000,
                      session_timeout_s=0.4, poll_timeout_s=0.02)
    with Engine(ec) as engine:
        engine.add_stream(payments_stream)
        for iid, ts, fields in events:
            if iid == kill_at:
                victim = engine.live_units()[0].unit_id
                engine.kill_unit(victim)
            engine.ingest("payments", fields, timestamp=ts, ingest_id=iid, expect_reply=False)
        engine.wait_idle(timeout=120)
        states = engine.states()
        replies = engine.read_replies("payments")
    return states, replies


def _flatten(states: dict) -> dict:
    return {(tp.topic, key): st for tp, per in states.items() for key, st in per.items()}


def _values_equal(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    for k, v in a.items():
        w = b[k]
        if isinstance(v, float) or isinstance(w, float):
            if not math.isclose(v, w, rel_tol=1e-9, abs_tol=0.0):
                return False
        elif v != w:
            return False
    return True


@pytest.mark.slow
def test_07_recovery_equivalence(tmp_path, payments_stream):
    events = _recovery_events(20_000, 7)
    ref_states, ref_replies = _recovery_run(payments_stream, tmp_path / "ref", events)
    ref_states = _flatten(ref_states)
    ref = {}
    for f in ref_replies:
        ref.setdefault((f.ingest_id, f.topic), f.values)
    rng = random.Random(77)
    kills = sorted(rng.randrange(1_000, 19_000) for _ in range(10))
    failures = []
    dup_total = 0
    for k in kills:
        states, replies = _recovery_run(payments_stream, tmp_path / f"kill{k}", events, kill_at=k)
        states = _flatten(states)
        state_diff = sum(1 for key in ref_states.keys() | states.keys() if ref_states.get(key) != states.get(key))
        seen = set()
        reply_diff = 0
        for f in replies:
            key = (f.ingest_id, f.topic)
            dup_total += key in seen
            seen.add(key)
            if key not in ref or not _values_equal(ref[key], f.values):
                reply_diff += 1
        missing = len(ref.keys() - seen)
        if state_diff or reply_diff or missing:
            failures.append(f"kill@{k}: {state_diff} state, {reply_diff} reply diffs, {missing} missing")
        shutil.rmtree(tmp_path / f"kill{k}", ignore_errors=True)
    verdict("#7 recovery equivalence", not failures,
            f"10 kill points {kills}; {len(ref_states)} keys and {len(ref)} replies compared; "
            f"{dup_total} replayed duplicate fragments all equal" if not failures else "; ".join(failures))


# ----------------------------------------------------------------------- 8


def test_08_reservoir_durability(tmp_path):
    rng = random.Random(8)
    chunk = 50
    events = []
    t = 0
    for i in range(11 * chunk):
        t += rng.randrange(0, 30)
        events.append(Event(t, {"card": f"c{rng.randrange(9)}", "amount": rng.randrange(1, 9999) / 100,
                                "ok": rng.random() < 0.5, "n": rng.randrange(-5, 5)}))
    problems = []
    for crash_after in range(1, 11):
        d = tmp_path / f"crash{crash_after}"
        r = Reservoir(d, chunk_events=chunk, fsync=True)
        n = crash_after * chunk + rng.randrange(1, chunk)   # chunk sealed, a few events left open
        for e in events[:n]:
            r.append(e)
        r.flush()
        r.abandon()   # crash: the open chunk is lost
        # a torn, half-written next chunk must be dropped on recovery
        nxt = d / f"{crash_after:08d}.chk"
        nxt.write_bytes((d / f"{crash_after - 1:08d}.chk").read_bytes()[:37])
        r2 = Reservoir(d, chunk_events=chunk)
        pos = r2.recovered_position
        durable = crash_after * chunk
        if (pos.chunk_id, pos.index, r2.next_seq) != (crash_after, 0, durable):
            problems.append(f"crash {crash_after}: position {pos}, next_seq {r2.next_seq}")
        prefix = list(r2.scan())
        if encode_block(prefix) != encode_block(events[:durable]) or decode_block(encode_block(prefix)) != events[:durable]:
            problems.append(f"crash {crash_after}: decoded prefix differs")
        r2.close()
    # interior corruption: flip one byte in the middle of chunk 4 of the full run
    d = tmp_path / "crash10"
    blob = bytearray((d / "00000004.chk").read_bytes())
    blob[len(blob) // 2] ^= 0x40
    (d / "00000004.chk").write_bytes(bytes(blob))
    try:
        Reservoir(d, chunk_events=chunk)
        detected = False
    except CorruptChunkError:
        detected = True
    ok = not problems and detected
    verdict("#8 reservoir durability", ok,
            f"10 crash points consistent and byte-identical; interior corruption detected={detected}"
            if ok else "; ".join(problems) + f"; detected={detected}")


# ----------------------------------------------------------------------- 9


def test_09_iterator_count_law(tmp_path):
    two = [WindowSpec.sliding(MINUTE), WindowSpec.sliding(5 * MINUTE)]
    ten = misaligned_windows(10)
    a, b = share_tail(two).total, share_tail(ten).total
    metrics = [MetricSpec(f"w{i}", w, ("card",), "count") for i, w in enumerate(ten)]
    lr = LocalRun(metrics, tmp_path / "r")
    runner_count = lr.runner.iterator_count()
    lr.close()
    plan_count = build_plan(metrics).iterator_plan().total
    ok = a == 3 and b == 20 and runner_count == 20 and plan_count == 20
    verdict("#9 iterator-count law", ok,
            f"{{1min, 5min}} -> {a} (want 3); 10 misaligned -> share_tail {b}, plan {plan_count}, "
            f"open cursors {runner_count} (want 20)")


# ---------------------------------------------------------------------- 10


@pytest.mark.slow
def test_10_critical_path_isolation(tmp_path):
    cfg = InjectorConfig(throughput=300, duration_s=10, warmup_s=2, seed=10, prefill_events=3000,
                         prefill_span_ms=5 * MINUTE)
    ec = bench_engine(tmp_path, chunk_events=64, cache_capacity=8, fsync=True)
    report, _ = run_injection(cfg, bench_stream(default_metrics(WindowSpec.sliding(MINUTE))), ec, run="isolation")
    work_done = report.emitted
    ok = report.owner_io_ops == 0 and report.incomplete == 0 and report.cache_misses > 0
    verdict("#10 critical-path isolation", ok,
            f"{work_done} events with 64-event chunks: {report.owner_io_ops} disk ops on owner thread, "
            f"{report.cache_misses} chunk reads, all on background workers")


# ------------------------------------------------------------------- smoke


@pytest.mark.slow
def test_smoke_benchmark_500eps_60s(tmp_path):
    cfg = InjectorConfig(throughput=500, duration_s=60, warmup_s=10, seed=1)
    report, _ = run_injection(cfg, bench_stream(default_metrics(WindowSpec.sliding(5 * MINUTE))),
                              bench_engine(tmp_path), run="smoke")
    p999 = report.percentiles[99.9]
    ok = math.isfinite(p999) and report.incomplete == 0
    verdict("smoke 500 ev/s x 60 s", ok,
            f"p50 {report.percentiles[50.0]:.2f} ms, p99 {report.percentiles[99.0]:.2f} ms, p99.9 {p999:.2f} ms, "
            f"achieved {report.achieved_throughput:.1f} ev/s, valid={report.valid}")
