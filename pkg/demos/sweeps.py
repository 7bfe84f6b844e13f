"""Latency against hop size, at desk scale.

Hopping windows keep one state per live window, w/s of them, so shrinking the
hop toward sliding-window precision multiplies the work done per event. The
real sliding window pays for one arrival and its expirations instead. This
runs a short version of the hop sweep and prints the latency table. On a
single core the 100 ms hop cannot keep up with 200 ev/s and is reported as
an invalid run, which is the point.

    python demos/sweeps.py            # about a minute
    slidewin-bench sweep-hops --duration 60 --out results/   # the full run
"""

import tempfile

from slidewin import SECOND, MINUTE
from slidewin.bench import InjectorConfig, format_table, sweep_hops
from slidewin.engine import EngineConfig

cfg = InjectorConfig(throughput=200, duration_s=8, warmup_s=2, seed=3)
with tempfile.TemporaryDirectory() as root:
    ec = EngineConfig(data_root=root + "/data", fsync=False)
    results = sweep_hops(cfg, ec, window_ms=MINUTE, hops=(10 * SECOND, SECOND, 100))
print(format_table(results))
for r, _ in results:
    print(f"{r.run:<12} live hop windows per key: {r.extra['live_windows']}")
