"""Why hopping windows undercount bursts.

Five payments on one card, at 50s, 120s, 180s, 240s and 345s. A fraud rule
asks for "more than four payments within five minutes". The real sliding
window sees all five when the last one arrives. A five-minute window hopping
every minute never holds more than four of them, so the rule never fires.

    python demos/burst_accuracy.py
"""

import tempfile

from slidewin import MINUTE, SECOND, Event, MetricSpec, WindowSpec
from slidewin.plan import PlanRunner, build_plan
from slidewin.reservoir import Reservoir
from slidewin.state_store import StateStore

metrics = [
    MetricSpec("sliding_count", WindowSpec.sliding(5 * MINUTE), ("card",), "count"),
    MetricSpec("hopping_count", WindowSpec.hopping(5 * MINUTE, MINUTE), ("card",), "count"),
]

with tempfile.TemporaryDirectory() as d:
    reservoir = Reservoir(d, fsync=False)
    runner = PlanRunner(build_plan(metrics), reservoir, StateStore())
    runner.keep_hop_finals = True

    for s in (50, 120, 180, 240, 345):
        e = Event(s * SECOND, {"card": "4242"})
        reservoir.append(e)
        reply = runner.process(e)
        print(f"t={s:>3}s  sliding={reply['sliding_count']}  hopping(oldest open window)={reply['hopping_count']}")

    windows = runner.hop_finals + runner.hopping_values()
    best = max(windows, key=lambda h: h.value)
    print(f"\nbest hop window: [{best.start // SECOND}s, {best.end // SECOND}s) with {best.value} payments")
    print("a '> 4 in 5 min' rule fires on the sliding window only")
    runner.close()
    reservoir.close()
