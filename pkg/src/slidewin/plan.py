"""Operator DAG for one (topic, partition) and its execution.

Metrics are compiled into paths Window -> [Filter] -> GroupBy -> Aggregator.
Structurally equal prefixes are merged, so metrics over the same window and
grouping share one window node and one group-by node.

Sliding windows are driven by reservoir cursors. A cursor sits at a fixed lag
``d`` behind the newest event time ``t`` and has consumed every event with
``timestamp <= t - d``. A window of size ``w`` and lag ``l`` owns the cursors at
``l`` (its arriving edge) and ``l + w`` (its expiring edge). Cursors at the same
lag are shared by every window that needs them.

Hopping (and tumbling) windows never touch the reservoir: an event updates the
state of each live window that contains it and is then forgotten.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field

from .model import AggKind, Aggregation, Event, MetricSpec, Predicate, WindowSpec, sliding_eval_point
from .reservoir import IteratorPlan, share_tail
from .state_store import new_state

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------- DAG


@dataclass(eq=False)
class AggregatorLeaf:
    aggregation: Aggregation
    leaf_id: str
    metric_ids: list = field(default_factory=list)
    # events older than this sequence number are invisible to the leaf
    start_seq: int = 0

    @property
    def kind(self) -> AggKind:
        return self.aggregation.kind


@dataclass(eq=False)
class GroupByNode:
    fields: tuple
    leaves: list = field(default_factory=list)


@dataclass(eq=False)
class FilterNode:
    predicate: Predicate
    children: list = field(default_factory=list)


@dataclass(eq=False)
class WindowNode:
    spec: WindowSpec
    children: list = field(default_factory=list)

    def groupbys(self):
        """Yield (predicate or None, GroupByNode) under this window."""
        for child in self.children:
            if isinstance(child, FilterNode):
                for g in child.children:
                    yield child.predicate, g
            else:
                yield None, child

    def leaves(self):
        for pred, g in self.groupbys():
            for leaf in g.leaves:
                yield pred, g, leaf


def leaf_identity(metric: MetricSpec) -> str:
    """Stable name for the aggregation a metric computes, independent of its id."""
    shape = {
        "window": metric.window.canonical().to_dict(),
        "filter": metric.filter.to_list() if metric.filter is not None else None,
        "group_by": list(metric.group_by),
        "aggregation": str(metric.aggregation),
    }
    blob = json.dumps(shape, sort_keys=True, separators=(",", ":"), default=repr).encode()
    return "leaf:" + hashlib.blake2b(blob, digest_size=8).hexdigest()


class PlanDag:
    """Metric DAG with maximal prefix sharing (or one chain per metric if ``share`` is off)."""

    def __init__(self, share: bool = True):
        self.share = share
        self.windows: list = []
        self.metrics: dict = {}
        self._paths: dict = {}

    def _child(self, children: list, match, make):
        if self.share:
            for c in children:
                if match(c):
                    return c
        c = make()
        children.append(c)
        return c

    def add_metric(self, metric: MetricSpec, start_seq: int = 0) -> AggregatorLeaf:
        if metric.metric_id in self.metrics:
            if self.metrics[metric.metric_id] == metric:
                return self._paths[metric.metric_id][-1]
            raise ValueError(f"metric {metric.metric_id!r} already registered with a different definition")
        spec = metric.window.canonical()
        wn = self._child(self.windows, lambda c: c.spec == spec, lambda: WindowNode(spec))
        parent = wn
        fn = None
        if metric.filter is not None:
            pred = metric.filter
            fn = self._child(wn.children, lambda c: isinstance(c, FilterNode) and c.predicate == pred,
                             lambda: FilterNode(pred))
            parent = fn
        gb = metric.group_by
        gn = self._child(parent.children, lambda c: isinstance(c, GroupByNode) and c.fields == gb,
                         lambda: GroupByNode(gb))
        leaf_id = leaf_identity(metric) if self.share else "metric:" + metric.metric_id
        agg = metric.aggregation
        leaf = self._child(gn.leaves, lambda c: c.aggregation == agg,
                           lambda: AggregatorLeaf(agg, leaf_id, start_seq=start_seq))
        leaf.metric_ids.append(metric.metric_id)
        self.metrics[metric.metric_id] = metric
        self._paths[metric.metric_id] = (wn, fn, gn, leaf)
        return leaf

    def remove_metric(self, metric_id: str) -> AggregatorLeaf | None:
        """Unregister a metric. Returns its leaf if no other metric still uses it."""
        wn, fn, gn, leaf = self._paths.pop(metric_id)
        del self.metrics[metric_id]
        leaf.metric_ids.remove(metric_id)
        if leaf.metric_ids:
            return None
        gn.leaves.remove(leaf)
        if not gn.leaves:
            (fn or wn).children.remove(gn)
            if fn is not None and not fn.children:
                wn.children.remove(fn)
            if not wn.children:
                self.windows.remove(wn)
        return leaf

    def leaf_for(self, metric_id: str) -> AggregatorLeaf:
        return self._paths[metric_id][-1]

    def leaves(self) -> list:
        return [leaf for wn in self.windows for _, _, leaf in wn.leaves()]

    def node_counts(self) -> dict:
        filters = groupbys = 0
        for wn in self.windows:
            for c in wn.children:
                if isinstance(c, FilterNode):
                    filters += 1
                    groupbys += len(c.children)
                else:
                    groupbys += 1
        return {"window": len(self.windows), "filter": filters, "group_by": groupbys,
                "aggregator": len(self.leaves())}

    def iterator_plan(self) -> IteratorPlan:
        return share_tail([wn.spec for wn in self.windows])


def build_plan(metrics, share: bool = True, start_seq: int = 0) -> PlanDag:
    dag = PlanDag(share)
    for m in metrics:
        dag.add_metric(m, start_seq)
    return dag


# ------------------------------------------------------------------- operators


@dataclass
class WindowDelta:
    arrivals: list
    expirations: list
    t_eval: int
    # sequence numbers of the first arrival / expiration, for late-added leaves
    arrival_seq: int = 0
    expiry_seq: int = 0


@dataclass
class Diagnostics:
    filter_missing_field: int = 0
    group_missing_field: int = 0


def eval_filter(predicate: Predicate | None, delta: WindowDelta, diag: Diagnostics | None = None) -> WindowDelta:
    """Restrict a delta to matching events. A missing field means no match."""
    if predicate is None:
        return delta

    def keep(events):
        out = []
        for e in events:
            try:
                if predicate.matches(e.fields):
                    out.append(e)
            except KeyError:
                if diag is not None:
                    diag.filter_missing_field += 1
        return out

    return WindowDelta(keep(delta.arrivals), keep(delta.expirations), delta.t_eval)


def group_delta(fields: tuple, delta: WindowDelta, diag: Diagnostics | None = None) -> dict:
    """Split a delta into ``{group_key: (expirations, arrivals)}``."""
    out: dict = {}
    for slot, events in ((0, delta.expirations), (1, delta.arrivals)):
        for e in events:
            f = e.fields
            try:
                key = tuple([f[n] for n in fields])
            except KeyError:
                if diag is not None:
                    diag.group_missing_field += 1
                continue
            pair = out.get(key)
            if pair is None:
                pair = out[key] = ([], [])
            pair[slot].append(e)
    return out


def empty_value(kind: AggKind):
    """Reply value of a group with no events in its window (None means omitted)."""
    if kind is AggKind.SUM:
        return 0.0
    if kind is AggKind.AVG:
        return None
    return 0


def state_value(state, kind: AggKind):
    return empty_value(kind) if state is None else state.value()


def eval_aggregate(leaf: AggregatorLeaf, grouped: dict, store, reply_group=None, namespace_group=()) -> list:
    """Apply expirations, then arrivals, to each touched group's state.

    Emptied groups are deleted. Returns ``(group, metric_id, value)`` for
    ``reply_group`` only.
    """
    kind = leaf.aggregation.kind
    fname = leaf.aggregation.field
    lid = leaf.leaf_id
    for group, (expired, arrived) in grouped.items():
        key = (lid, namespace_group + group)
        st = store.get(key)
        if st is None:
            if not arrived:
                continue
            st = new_state(kind.value)
        if fname is None:
            for e in expired:
                st.remove(None)
            for e in arrived:
                st.add(None)
        else:
            for e in expired:
                st.remove(e.fields[fname])
            for e in arrived:
                st.add(e.fields[fname])
        if st.empty():
            store.delete(key)
        else:
            store.put(key, st)
    if reply_group is None:
        return []
    value = state_value(store.get((lid, namespace_group + reply_group)), kind)
    return [(reply_group, mid, value) for mid in leaf.metric_ids]


# --------------------------------------------------------------------- hopping


@dataclass
class HoppingState:
    """Live hop windows of one hopping window node, keyed by start instant.

    Each entry holds the state keys written into that window, so closing the
    window can emit and drop them.
    """

    size_ms: int
    hop_ms: int
    live: dict = field(default_factory=dict)

    def starts_containing(self, t: int) -> range:
        """Starts ``k * hop`` with ``start <= t < start + size``."""
        first = ((t - self.size_ms) // self.hop_ms + 1) * self.hop_ms
        return range(first, t + 1, self.hop_ms)

    @property
    def live_windows(self) -> int:
        return len(self.live)


@dataclass(frozen=True)
class HopResult:
    start: int
    end: int
    metric_id: str
    group: tuple
    value: object


def _close_hops(state: HoppingState, node: WindowNode, t: int, store, out: list) -> None:
    live = state.live
    size = state.size_ms
    leaves = {leaf.leaf_id: leaf for _, _, leaf in node.leaves()}
    while live:
        start = next(iter(live))
        if start + size > t:
            break
        for key in sorted(live.pop(start), key=repr):
            st = store.get(key)
            if st is None:
                continue
            store.delete(key)
            leaf = leaves.get(key[0])
            if leaf is None:
                continue
            for mid in leaf.metric_ids:
                out.append(HopResult(start, start + size, mid, key[1][1:], st.value()))


def advance_hopping(state: HoppingState, node: WindowNode, e: Event, store,
                    diag: Diagnostics | None = None, seq: int | None = None) -> list:
    """Close windows that ended at or before ``e`` and add ``e`` to every window containing it.

    Returns the final results of the windows closed by this event.
    """
    t = e.timestamp
    closed: list = []
    _close_hops(state, node, t, store, closed)
    starts = state.starts_containing(t)
    live = state.live
    for start in starts:
        if start not in live:
            live[start] = set()
    arrival = WindowDelta([e], [], t)
    for child in node.children:
        if isinstance(child, FilterNode):
            d = eval_filter(child.predicate, arrival, diag)
            gbs = child.children
        else:
            d = arrival
            gbs = (child,)
        if not d.arrivals:
            continue
        for gn in gbs:
            grouped = group_delta(gn.fields, d, diag)
            if not grouped:
                continue
            for leaf in gn.leaves:
                if seq is not None and seq < leaf.start_seq:
                    continue
                for start in starts:
                    eval_aggregate(leaf, grouped, store, namespace_group=(start,))
                    bucket = live[start]
                    for g in grouped:
                        bucket.add((leaf.leaf_id, (start,) + g))
    return closed


# -------------------------------------------------------------------- execution


class PlanRunner:
    """Executes a PlanDag over a reservoir and a state store.

    ``process(e)`` must be called right after ``e`` was appended to the reservoir.
    """

    def __init__(self, dag: PlanDag, reservoir, store):
        self.dag = dag
        self.reservoir = reservoir
        self.store = store
        self.diag = Diagnostics()
        self.cursors: dict = {}
        self.hopping: dict = {}
        self.hop_finals: list = []
        self.keep_hop_finals = False
        self.sync()

    # -- structure

    def _needed_offsets(self) -> dict:
        roles = {}
        for wn in self.dag.windows:
            if wn.spec.is_sliding:
                roles.setdefault(wn.spec.lag_ms + wn.spec.size_ms, "head")
                roles[wn.spec.lag_ms] = "tail"
        return roles

    def sync(self, seqs: dict | None = None) -> None:
        """Open cursors the DAG needs and close the rest.

        New cursors are placed by time relative to the newest appended event, or
        at the given ``seqs`` (lag -> seq) when restoring.
        """
        r = self.reservoir
        roles = self._needed_offsets()
        for off in list(self.cursors):
            if off not in roles:
                self.cursors.pop(off).close()
        t = r.last_timestamp
        for off, role in sorted(roles.items()):
            if off in self.cursors:
                continue
            if seqs is not None and off in seqs:
                seq = max(seqs[off], r.first_seq)
            elif t < 0:
                seq = r.next_seq
            else:
                seq = max(r.time_search(t - off + 1), r.first_seq)
            self.cursors[off] = r.open_iterator(role, seq=seq)
        for wn in self.dag.windows:
            if not wn.spec.is_sliding and id(wn) not in self.hopping:
                self.hopping[id(wn)] = HoppingState(wn.spec.size_ms, wn.spec.hop_ms)
        alive = {id(wn) for wn in self.dag.windows}
        for k in list(self.hopping):
            if k not in alive:
                del self.hopping[k]

    def add_metric(self, metric: MetricSpec) -> AggregatorLeaf:
        leaf = self.dag.add_metric(metric, start_seq=self.reservoir.next_seq)
        self.sync()
        return leaf

    def remove_metric(self, metric_id: str) -> None:
        leaf = self.dag.remove_metric(metric_id)
        if leaf is not None:
            for key in [k for k in self.store.keys() if k[0] == leaf.leaf_id]:
                self.store.delete(key)
            for hs in self.hopping.values():
                for bucket in hs.live.values():
                    bucket -= {k for k in bucket if k[0] == leaf.leaf_id}
        self.sync()

    def iterator_count(self) -> int:
        return len(self.cursors)

    # -- checkpoint support

    def export_positions(self) -> dict:
        return {
            "cursors": {str(off): it.seq for off, it in self.cursors.items()},
            "start_seqs": {leaf.leaf_id: leaf.start_seq for leaf in self.dag.leaves()},
        }

    def restore_positions(self, positions: dict) -> None:
        for it in self.cursors.values():
            it.close()
        self.cursors.clear()
        starts = positions.get("start_seqs", {})
        for leaf in self.dag.leaves():
            if leaf.leaf_id in starts:
                leaf.start_seq = starts[leaf.leaf_id]
        self.sync({int(k): v for k, v in positions.get("cursors", {}).items()})
        self.hopping.clear()
        self.sync()
        self._rebuild_hops()

    def _rebuild_hops(self) -> None:
        t = self.reservoir.last_timestamp
        by_leaf = {}
        for wn in self.dag.windows:
            if not wn.spec.is_sliding:
                for _, _, leaf in wn.leaves():
                    by_leaf[leaf.leaf_id] = self.hopping[id(wn)]
        for key in self.store.keys():
            hs = by_leaf.get(key[0])
            if hs is not None:
                start = key[1][0]
                hs.live.setdefault(start, set()).add(key)
        for hs in self.hopping.values():
            if t >= 0:
                for start in hs.starts_containing(t):
                    hs.live.setdefault(start, set())
            hs.live = dict(sorted(hs.live.items()))

    def watermark(self) -> int:
        """Oldest event time any cursor may still read."""
        r = self.reservoir
        w = r.last_timestamp + 1
        for it in self.cursors.values():
            e = it.peek()
            if e is not None and e.timestamp < w:
                w = e.timestamp
        return w

    def close(self) -> None:
        for it in self.cursors.values():
            it.close()
        self.cursors.clear()

    # -- per event

    def advance_sliding(self, e: Event) -> list:
        """Move every cursor to ``e`` and return ``(window_node, WindowDelta)`` pairs."""
        t = e.timestamp
        crossed = {}
        for off, it in self.cursors.items():
            s0 = it.seq
            crossed[off] = (s0, it.take_until(t - off))
        t_eval = sliding_eval_point(t)
        out = []
        for wn in self.dag.windows:
            spec = wn.spec
            if not spec.is_sliding:
                continue
            s_old, s_evs = crossed[spec.lag_ms + spec.size_ms]
            e_old, e_evs = crossed[spec.lag_ms]
            s_new = s_old + len(s_evs)
            n_exp = min(s_new, e_old) - s_old
            expirations = s_evs[:n_exp] if n_exp > 0 else []
            a0 = max(e_old, s_new)
            arrivals = e_evs[a0 - e_old:] if a0 < e_old + len(e_evs) else []
            out.append((wn, WindowDelta(arrivals, expirations, t_eval, a0, s_old)))
        return out

    def process(self, e: Event, seq: int | None = None) -> dict:
        """Update every window for ``e``; return ``{metric_id: value}`` for e's groups."""
        if seq is None:
            seq = self.reservoir.next_seq - 1
        store, diag = self.store, self.diag
        reply: dict = {}
        efields = e.fields
        for wn, delta in self.advance_sliding(e):
            if not delta.arrivals and not delta.expirations:
                self._reply_window(wn, efields, reply)
                continue
            low = min(delta.arrival_seq, delta.expiry_seq)
            fresh = any(leaf.start_seq > low for _, _, leaf in wn.leaves())
            for child in wn.children:
                if isinstance(child, FilterNode):
                    d = eval_filter(child.predicate, delta, diag)
                    gbs = child.children
                    pred = child.predicate
                else:
                    d, gbs, pred = delta, (child,), None
                for gn in gbs:
                    rg = _group_of(gn.fields, efields)
                    if fresh:
                        for leaf in gn.leaves:
                            sub = _clip(delta, leaf.start_seq)
                            grouped = group_delta(gn.fields, eval_filter(pred, sub, diag), diag)
                            self._emit(eval_aggregate(leaf, grouped, store, rg), reply)
                        continue
                    grouped = group_delta(gn.fields, d, diag) if (d.arrivals or d.expirations) else {}
                    for leaf in gn.leaves:
                        self._emit(eval_aggregate(leaf, grouped, store, rg), reply)
        for wn in self.dag.windows:
            if wn.spec.is_sliding:
                continue
            hs = self.hopping[id(wn)]
            closed = advance_hopping(hs, wn, e, store, diag, seq)
            if self.keep_hop_finals:
                self.hop_finals.extend(closed)
            oldest = hs.starts_containing(e.timestamp)[0]
            for _, gn, leaf in wn.leaves():
                rg = _group_of(gn.fields, efields)
                if rg is None:
                    continue
                v = state_value(store.get((leaf.leaf_id, (oldest,) + rg)), leaf.kind)
                for mid in leaf.metric_ids:
                    if v is not None:
                        reply[mid] = v
        return reply

    def _reply_window(self, wn: WindowNode, efields, reply: dict) -> None:
        store = self.store
        for _, gn, leaf in wn.leaves():
            rg = _group_of(gn.fields, efields)
            if rg is None:
                continue
            v = state_value(store.get((leaf.leaf_id, rg)), leaf.kind)
            if v is not None:
                for mid in leaf.metric_ids:
                    reply[mid] = v

    @staticmethod
    def _emit(results: list, reply: dict) -> None:
        for _, mid, v in results:
            if v is not None:
                reply[mid] = v

    def hopping_values(self) -> list:
        """Current values of every live hop window."""
        out = []
        for wn in self.dag.windows:
            if wn.spec.is_sliding:
                continue
            hs = self.hopping[id(wn)]
            leaves = {leaf.leaf_id: leaf for _, _, leaf in wn.leaves()}
            for start, keys in hs.live.items():
                for key in keys:
                    st = self.store.get(key)
                    if st is not None:
                        for mid in leaves[key[0]].metric_ids:
                            out.append(HopResult(start, start + hs.size_ms, mid, key[1][1:], st.value()))
        return out

    def state_counts(self) -> Counter:
        return Counter(k[0] for k in self.store.keys())


def _group_of(fields: tuple, efields):
    try:
        return tuple([efields[n] for n in fields])
    except KeyError:
        return None


def _clip(delta: WindowDelta, start_seq: int) -> WindowDelta:
    a = delta.arrivals[max(0, start_seq - delta.arrival_seq):]
    x = delta.expirations[max(0, start_seq - delta.expiry_seq):]
    return WindowDelta(a, x, delta.t_eval, max(delta.arrival_seq, start_seq), max(delta.expiry_seq, start_seq))
