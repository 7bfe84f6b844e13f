"""Load injector and latency harness.

Events are sent on a fixed schedule (one every ``1/throughput`` seconds) from a
single thread. Latency is taken from the *intended* send instant to the moment
the joined response completes, so a stalled injector or engine shows up in the
numbers instead of silently thinning the sample (coordinated omission).
Samples whose intended send falls inside the warmup are dropped.

Usage::

    python -m slidewin.bench run --throughput 500 --duration 60 --warmup 10 --out results/
    python -m slidewin.bench sweep-windows --config bench.yaml --out results/
"""

from __future__ import annotations

import argparse
import csv
import gzip
import logging
import math
import resource
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields as dc_fields, replace
from pathlib import Path

import numpy as np
import yaml

from .engine import Engine, EngineConfig
from .model import MINUTE, SECOND, HOUR, MetricSpec, StreamConfig, TopicSpec, WindowSpec
from .reservoir import share_tail

log = logging.getLogger(__name__)

PERCENTILES = (50.0, 90.0, 99.0, 99.9, 99.99, 100.0)
STREAM = "bench"


# ------------------------------------------------------------------ dataset


@dataclass
class DatasetConfig:
    card_cardinality: int = 100_000
    merchant_cardinality: int = 1_000
    zipf_s: float = 1.2
    amount_mu: float = 3.5
    amount_sigma: float = 1.0


class SyntheticData:
    """Card keys Zipf-distributed over a bounded key set, uniform merchants, log-normal amounts."""

    def __init__(self, cfg: DatasetConfig, seed: int):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        ranks = np.arange(1, cfg.card_cardinality + 1, dtype=float)
        w = ranks ** -cfg.zipf_s
        self._cdf = np.cumsum(w / w.sum())

    def batch(self, n: int) -> list:
        cfg, rng = self.cfg, self.rng
        cards = np.minimum(np.searchsorted(self._cdf, rng.random(n)), cfg.card_cardinality - 1)
        merchants = rng.integers(0, cfg.merchant_cardinality, n)
        amounts = np.round(rng.lognormal(cfg.amount_mu, cfg.amount_sigma, n), 2)
        return [{"card": f"c{c}", "merchant": f"m{m}", "amount": float(a)}
                for c, m, a in zip(cards.tolist(), merchants.tolist(), amounts.tolist())]


# ----------------------------------------------------------------- histogram


class LogHistogram:
    """Log-bucketed latency histogram: 3 significant digits up to ``max_ms``."""

    def __init__(self, max_ms: float = 600_000.0, digits: int = 3):
        self.ratio = 1.0 + 10.0 ** -digits
        self.min_us = 1.0
        self.max_us = max_ms * 1000.0
        self.nbuckets = int(math.ceil(math.log(self.max_us / self.min_us) / math.log(self.ratio))) + 2
        self.counts = np.zeros(self.nbuckets, dtype=np.int64)
        self.total = 0
        self.max_seen = 0.0

    def _bucket(self, us):
        us = np.clip(np.asarray(us, dtype=float), self.min_us, self.max_us)
        return np.floor(np.log(us / self.min_us) / math.log(self.ratio)).astype(np.int64) + 1

    def record(self, values_ms) -> None:
        v = np.atleast_1d(np.asarray(values_ms, dtype=float))
        if not len(v):
            return
        np.add.at(self.counts, self._bucket(v * 1000.0), 1)
        self.total += len(v)
        self.max_seen = max(self.max_seen, float(v.max()))

    def percentile(self, q: float) -> float:
        """Upper edge of the bucket holding the q-th percentile, in ms (never above the max)."""
        if self.total == 0:
            return float("nan")
        if q >= 100.0:
            return self.max_seen
        rank = max(1, math.ceil(q / 100.0 * self.total))
        idx = int(np.searchsorted(np.cumsum(self.counts), rank))
        upper_us = self.min_us * self.ratio ** idx
        return min(upper_us / 1000.0, self.max_seen)


# -------------------------------------------------------------------- runs


@dataclass
class InjectorConfig:
    throughput: float = 500.0
    duration_s: float = 60.0
    warmup_s: float = 10.0
    seed: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    # pre-filled history: ``prefill_events`` spread evenly over ``prefill_span_ms``,
    # starting ``prefill_start_ms`` before the first injected event (default: ending at it)
    prefill_events: int = 0
    prefill_span_ms: int = 0
    prefill_start_ms: int | None = None
    partitions: int = 1
    reply_timeout_s: float = 30.0
    # interpreter thread switch interval during the run; the 5 ms default lets
    # background threads hold the processor units off for whole milliseconds
    switch_interval_s: float = 0.0005

    def __post_init__(self):
        if self.throughput <= 0:
            raise ValueError("throughput must be > 0")
        if not 0 <= self.warmup_s < self.duration_s:
            raise ValueError("need 0 <= warmup < duration")


@dataclass
class HistogramReport:
    run: str
    percentiles: dict
    numpy_percentiles: dict
    target_throughput: float
    achieved_throughput: float
    emitted: int
    measured: int
    incomplete: int
    cache_misses: int
    blocking_loads: int
    cache_hits: int
    resident_high_water: int
    owner_io_ops: int
    iterators: int
    heap_high_water_kb: int
    valid: bool
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("percentiles", "numpy_percentiles", "extra")}
        for q, v in self.percentiles.items():
            d[f"p{q:g}_ms"] = round(v, 3)
        d.update(self.extra)
        return d


@dataclass
class LatencySamples:
    intended: np.ndarray
    actual: np.ndarray
    received: np.ndarray

    @property
    def corrected_ms(self) -> np.ndarray:
        return (self.received - self.intended) * 1000.0

    @property
    def uncorrected_ms(self) -> np.ndarray:
        return (self.received - self.actual) * 1000.0


def bench_stream(metrics, partitions: int = 1) -> StreamConfig:
    return StreamConfig(
        STREAM,
        {"card": "str", "merchant": "str", "amount": "float"},
        tuple(metrics),
        (TopicSpec("card", ("card",), partitions),),
    )


def default_metrics(window: WindowSpec) -> list:
    return [
        MetricSpec("sum_amount", window, ("card",), "sum(amount)"),
        MetricSpec("count", window, ("card",), "count"),
    ]


def misaligned_windows(n: int, base_size_ms: int = 2_000, lag_step_ms: int = 331, size_step_ms: int = 397) -> list:
    """``n`` sliding windows whose ends and starts are pairwise distinct."""
    out, used = [], set()
    lag = 0
    for i in range(n):
        size = base_size_ms + i * size_step_ms
        while lag in used or lag + size in used or lag == lag + size:
            lag += 1
        used.update((lag, lag + size))
        out.append(WindowSpec.sliding(size, lag))
        lag += lag_step_ms
    return out


def _prefill(engine: Engine, data: SyntheticData, n: int, span_ms: int, t_first: int) -> None:
    if n <= 0:
        return
    step = span_ms / n
    for i, fields in enumerate(data.batch(n)):
        engine.ingest(STREAM, fields, timestamp=t_first + int(i * step), expect_reply=False)


def run_injection(cfg: InjectorConfig, stream: StreamConfig, engine_config: EngineConfig,
                  run: str = "run", keep_data: bool = False) -> tuple:
    """One measured run against a fresh engine. Returns (HistogramReport, LatencySamples)."""
    work = Path(engine_config.data_root)
    if work.exists():
        shutil.rmtree(work)
    ec = replace(engine_config, reply_timeout_s=cfg.reply_timeout_s)
    data = SyntheticData(cfg.dataset, cfg.seed)
    n = int(round(cfg.throughput * cfg.duration_s))
    interval = 1.0 / cfg.throughput
    interval_ms = 1000.0 / cfg.throughput
    t_event0 = 10 * 24 * HOUR
    events = data.batch(n)
    old_switch = sys.getswitchinterval()
    sys.setswitchinterval(cfg.switch_interval_s)
    engine = Engine(ec).start()
    try:
        engine.add_stream(stream)
        start = cfg.prefill_span_ms if cfg.prefill_start_ms is None else cfg.prefill_start_ms
        _prefill(engine, data, cfg.prefill_events, cfg.prefill_span_ms, t_event0 - start)
        engine.wait_idle(timeout=max(120.0, cfg.prefill_events / 200))
        engine.reservoir_stats(reset=True)
        iterators = sum(engine.inspect(lambda u: sum(t.runner.iterator_count() for t in u.tasks.values())).values())

        intended = np.empty(n)
        actual = np.empty(n)
        responses = []
        t0 = time.perf_counter() + 0.05
        for i, fields in enumerate(events):
            due = t0 + i * interval
            delay = due - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            intended[i] = due
            actual[i] = time.perf_counter()
            responses.append(engine.ingest(STREAM, fields, timestamp=t_event0 + int(i * interval_ms)))
        for r in responses:
            r.wait(cfg.reply_timeout_s + 1.0)
        engine.wait_idle(timeout=cfg.reply_timeout_s)
        stats = engine.reservoir_stats()
    finally:
        engine.stop()
        sys.setswitchinterval(old_switch)
        if not keep_data:
            shutil.rmtree(work, ignore_errors=True)

    received = np.array([r.completed if r.complete else np.nan for r in responses])
    samples = LatencySamples(intended, actual, received)
    keep = (intended >= t0 + cfg.warmup_s) & ~np.isnan(received)
    lat = samples.corrected_ms[keep]
    hist = LogHistogram()
    hist.record(lat)
    done = received[~np.isnan(received)]
    wall = (done.max() - t0) if len(done) else float("nan")
    achieved = len(done) / wall if len(done) and wall > 0 else 0.0
    incomplete = int(np.isnan(received).sum())
    report = HistogramReport(
        run=run,
        percentiles={q: hist.percentile(q) for q in PERCENTILES},
        numpy_percentiles={q: float(np.percentile(lat, q)) if len(lat) else float("nan") for q in PERCENTILES},
        target_throughput=cfg.throughput,
        achieved_throughput=achieved,
        emitted=n,
        measured=int(keep.sum()),
        incomplete=incomplete,
        cache_misses=sum(s["cache_misses"] for s in stats.values()),
        blocking_loads=sum(s["blocking_loads"] for s in stats.values()),
        cache_hits=sum(s["cache_hits"] for s in stats.values()),
        resident_high_water=max((s["resident_high_water"] for s in stats.values()), default=0),
        owner_io_ops=sum(s["owner_io_ops"] for s in stats.values()),
        iterators=iterators,
        heap_high_water_kb=resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
        valid=achieved >= 0.95 * cfg.throughput and incomplete == 0,
    )
    if not report.valid:
        log.warning("run %s invalid: achieved %.1f ev/s of %.1f target, %d incomplete",
                    run, achieved, cfg.throughput, incomplete)
    return report, samples


# ------------------------------------------------------------------- sweeps


def sweep_hops(cfg: InjectorConfig, engine_config: EngineConfig, window_ms: int = MINUTE,
               hops=(10 * SECOND, SECOND, 100, 10)) -> list:
    """One hopping run per hop plus one sliding run, same seed and schedule."""
    out = []
    for hop in hops:
        spec = WindowSpec.hopping(window_ms, hop)
        r, s = run_injection(cfg, bench_stream(default_metrics(spec), cfg.partitions), engine_config,
                             run=f"hop={hop}ms")
        r.extra.update(window_ms=window_ms, hop_ms=hop, live_windows=window_ms // hop)
        out.append((r, s))
    r, s = run_injection(cfg, bench_stream(default_metrics(WindowSpec.sliding(window_ms)), cfg.partitions),
                         engine_config, run="sliding")
    r.extra.update(window_ms=window_ms, hop_ms=0, live_windows=0)
    out.append((r, s))
    return out


def sweep_windows(cfg: InjectorConfig, engine_config: EngineConfig, sizes=(MINUTE, HOUR, 24 * HOUR),
                  prefill_events: int | None = None, cache_capacity: int = 8, chunk_events: int = 512) -> list:
    """One sliding run per window size over identically pre-filled reservoirs.

    The history is laid at the injection rate from the start of the window, so
    in every run the start iterator expires history as fast as events arrive
    and the per-event work is the same whatever the size. The default history
    outlasts the run by five seconds. The cache is kept well below the history's
    chunk count so the resident set reflects what the iterators need, not how
    much history exists.
    """
    out = []
    engine_config = replace(engine_config, cache_capacity=cache_capacity, chunk_events=chunk_events)
    if prefill_events is None:
        prefill_events = int(cfg.throughput * (cfg.duration_s + 5))
    span = int(prefill_events * 1000 / cfg.throughput)
    for size in sizes:
        if span > size:
            raise ValueError(f"history of {span} ms does not fit a {size} ms window")
        c = replace(cfg, prefill_events=prefill_events, prefill_span_ms=span, prefill_start_ms=size)
        r, s = run_injection(c, bench_stream(default_metrics(WindowSpec.sliding(size)), cfg.partitions),
                             engine_config, run=f"window={size}ms")
        r.extra.update(window_ms=size)
        out.append((r, s))
    return out


def sweep_iterators(cfg: InjectorConfig, engine_config: EngineConfig, window_counts=(10, 40),
                    cache_capacity: int = 32, chunk_events: int = 256) -> list:
    """One run per number of pairwise misaligned windows (two iterators each).

    Window edges are spaced a little more than one chunk apart in event time,
    so every iterator sits on its own chunk.
    """
    out = []
    ec = replace(engine_config, cache_capacity=cache_capacity, chunk_events=chunk_events)
    chunk_span_ms = chunk_events * 1000.0 / cfg.throughput
    for n in window_counts:
        windows = misaligned_windows(n, base_size_ms=int(4 * chunk_span_ms),
                                     lag_step_ms=int(1.2 * chunk_span_ms), size_step_ms=int(1.4 * chunk_span_ms))
        plan = share_tail(windows)
        span = max(w.lag_ms + w.size_ms for w in windows)
        metrics = [MetricSpec(f"count_w{i}", w, ("card",), "count") for i, w in enumerate(windows)]
        prefill = int(span * cfg.throughput / 1000) + 1
        c = replace(cfg, prefill_events=prefill, prefill_span_ms=span)
        r, s = run_injection(c, bench_stream(metrics, cfg.partitions), ec, run=f"windows={n}")
        r.extra.update(windows=n, planned_iterators=plan.total, cache_capacity=cache_capacity)
        out.append((r, s))
    return out


# ------------------------------------------------------------------- output


def write_outputs(results: list, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.row() for r, _ in results]
    keys = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    with gzip.open(out / "samples.csv.gz", "wt", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "intended_s", "actual_s", "received_s", "corrected_ms", "uncorrected_ms"])
        for r, s in results:
            base = s.intended[0] if len(s.intended) else 0.0
            for i, a, rc, c, u in zip(s.intended - base, s.actual - base, s.received - base,
                                      s.corrected_ms, s.uncorrected_ms):
                w.writerow([r.run, f"{i:.6f}", f"{a:.6f}", f"{rc:.6f}", f"{c:.3f}", f"{u:.3f}"])
    with open(out / "percentiles.tsv", "w") as fh:
        fh.write("percentile\t" + "\t".join(r.run for r, _ in results) + "\n")
        for q in PERCENTILES:
            fh.write(f"{q:g}\t" + "\t".join(f"{r.percentiles[q]:.3f}" for r, _ in results) + "\n")


def format_table(results: list) -> str:
    lines = [f"{'run':<22}{'p50':>9}{'p99':>9}{'p99.9':>9}{'max':>9}{'ev/s':>9}{'misses':>8}{'hiwater':>8}  valid"]
    for r, _ in results:
        p = r.percentiles
        lines.append(f"{r.run:<22}{p[50.0]:9.2f}{p[99.0]:9.2f}{p[99.9]:9.2f}{p[100.0]:9.2f}"
                     f"{r.achieved_throughput:9.1f}{r.cache_misses:8d}{r.resident_high_water:8d}  {r.valid}")
    return "\n".join(lines)


# ---------------------------------------------------------------------- CLI


def _load_bench_config(path) -> dict:
    if path is None:
        return {}
    return yaml.safe_load(Path(path).read_text()) or {}


def _build(args, raw: dict):
    inj = dict(raw.get("injector", {}))
    ds = DatasetConfig(**raw.get("dataset", {}))
    for flag, key in (("throughput", "throughput"), ("duration", "duration_s"), ("warmup", "warmup_s"), ("seed", "seed")):
        v = getattr(args, flag)
        if v is not None:
            inj[key] = v
    known = {f.name for f in dc_fields(InjectorConfig)}
    cfg = InjectorConfig(dataset=ds, **{k: v for k, v in inj.items() if k in known})
    eng = dict(raw.get("engine", {}))
    eng.setdefault("data_root", str(Path(tempfile.mkdtemp(prefix="slidewin-bench-")) / "data"))
    eng.setdefault("fsync", False)
    return cfg, EngineConfig.from_dict(eng), raw.get("experiment", {})


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="slidewin-bench", description="latency benchmarks for sliding-window metrics")
    ap.add_argument("command", choices=["run", "sweep-hops", "sweep-windows", "sweep-iterators"])
    ap.add_argument("--config", help="YAML with injector / dataset / engine / experiment sections")
    ap.add_argument("--throughput", type=float, help="events per second")
    ap.add_argument("--duration", type=float, help="seconds of injection, warmup included")
    ap.add_argument("--warmup", type=float, help="seconds excluded from latency statistics")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="bench-out", help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg, ec, exp = _build(args, _load_bench_config(args.config))
    if args.command == "run":
        window = WindowSpec.from_dict(exp.get("window", {"kind": "sliding", "size_ms": 5 * MINUTE}))
        results = [run_injection(cfg, bench_stream(default_metrics(window), cfg.partitions), ec, run="run")]
    elif args.command == "sweep-hops":
        results = sweep_hops(cfg, ec, exp.get("window_ms", MINUTE), exp.get("hops_ms", (10 * SECOND, SECOND, 100, 10)))
    elif args.command == "sweep-windows":
        results = sweep_windows(cfg, ec, exp.get("sizes_ms", (MINUTE, HOUR, 24 * HOUR)), exp.get("prefill_events"),
                                exp.get("cache_capacity", 8), exp.get("chunk_events", 512))
    else:
        results = sweep_iterators(cfg, ec, exp.get("window_counts", (10, 40)), exp.get("cache_capacity", 32))
    write_outputs(results, args.out)
    print(format_table(results))
    return 0 if all(r.valid for r, _ in results) else 2


if __name__ == "__main__":
    sys.exit(main())
