"""Small drivers that run a plan over a reservoir without the engine around it."""

from slidewin.model import Event
from slidewin.plan import PlanRunner, build_plan, empty_value
from slidewin.reservoir import Reservoir
from slidewin.state_store import StateStore


class LocalRun:
    def __init__(self, metrics, directory, *, share=True, chunk_events=256, cache_capacity=64, **kw):
        self.metrics = list(metrics)
        self.reservoir = Reservoir(directory, chunk_events=chunk_events, cache_capacity=cache_capacity,
                                   fsync=False, **kw)
        self.store = StateStore()
        self.runner = PlanRunner(build_plan(self.metrics, share=share), self.reservoir, self.store)
        self._kinds = {m.metric_id: m.aggregation.kind for m in self.metrics}

    def push(self, ts, fields) -> dict:
        e = Event(ts, fields)
        self.reservoir.append(e)
        reply = self.runner.process(e)
        for mid, kind in self._kinds.items():
            reply.setdefault(mid, empty_value(kind))
        return reply

    def run(self, stream) -> list:
        return [self.push(ts, f) for ts, f in stream]

    def close(self):
        self.runner.close()
        self.reservoir.close()


def run_stream(metrics, stream, directory, **kw) -> list:
    lr = LocalRun(metrics, directory, **kw)
    try:
        return lr.run(stream)
    finally:
        lr.close()
