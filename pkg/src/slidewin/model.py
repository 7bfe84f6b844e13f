"""Domain vocabulary: events, window and metric specifications, stream configs.

All times are integer milliseconds. A sliding window evaluated for an event at
``t`` covers the half-open interval ``(t - size, t]``; hopping windows cover
``[start, start + size)`` with starts on multiples of the hop.
"""

from __future__ import annotations

import json
import math
import operator
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, NamedTuple

import yaml

SECOND = 1000
MINUTE = 60 * SECOND
HOUR = 60 * MINUTE
DAY = 24 * HOUR

SCALAR_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


class _EventFields(NamedTuple):
    timestamp: int
    fields: dict
    ingest_id: int = 0


class Event(_EventFields):
    """Timestamped record of named scalar fields; immutable by convention."""

    __slots__ = ()

    def __new__(cls, timestamp: int, fields: dict, ingest_id: int = 0):
        if not isinstance(timestamp, int) or timestamp < 0:
            raise ValueError(f"event timestamp must be a non-negative int, got {timestamp!r}")
        return tuple.__new__(cls, (timestamp, fields, ingest_id))

    def with_timestamp(self, ts: int) -> "Event":
        return tuple.__new__(Event, (ts, self.fields, self.ingest_id))


def _raw_event(timestamp: int, fields: dict, ingest_id: int = 0) -> Event:
    """Unchecked constructor for trusted decode paths."""
    return tuple.__new__(Event, (timestamp, fields, ingest_id))


class WindowKind(str, Enum):
    SLIDING = "sliding"
    HOPPING = "hopping"
    TUMBLING = "tumbling"


@dataclass(frozen=True)
class WindowSpec:
    """Window kind and extent.

    ``lag_ms`` shifts a sliding window into the past: with a lag the window
    evaluated at ``t`` covers ``(t - lag - size, t - lag]``. Two sliding windows
    are misaligned when neither their ends nor their starts coincide.
    """

    kind: WindowKind
    size_ms: int
    hop_ms: int | None = None
    lag_ms: int = 0

    def __post_init__(self):
        kind = WindowKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not isinstance(self.size_ms, int) or self.size_ms <= 0:
            raise ValueError(f"window size must be a positive int (ms), got {self.size_ms!r}")
        if self.lag_ms < 0:
            raise ValueError("window lag must be >= 0")
        if kind is WindowKind.SLIDING:
            if self.hop_ms is not None:
                raise ValueError("sliding windows take no hop")
        else:
            if self.lag_ms:
                raise ValueError("lag is only defined for sliding windows")
            if kind is WindowKind.TUMBLING:
                if self.hop_ms not in (None, self.size_ms):
                    raise ValueError("tumbling windows have hop == size")
                object.__setattr__(self, "hop_ms", self.size_ms)
            elif self.hop_ms is None or not 0 < self.hop_ms <= self.size_ms:
                raise ValueError(f"hopping windows need 0 < hop <= size, got hop={self.hop_ms!r}")

    @classmethod
    def sliding(cls, size_ms: int, lag_ms: int = 0) -> "WindowSpec":
        return cls(WindowKind.SLIDING, size_ms, None, lag_ms)

    @classmethod
    def hopping(cls, size_ms: int, hop_ms: int) -> "WindowSpec":
        return cls(WindowKind.HOPPING, size_ms, hop_ms)

    @classmethod
    def tumbling(cls, size_ms: int) -> "WindowSpec":
        return cls(WindowKind.TUMBLING, size_ms)

    @property
    def is_sliding(self) -> bool:
        return self.kind is WindowKind.SLIDING

    def canonical(self) -> "WindowSpec":
        """Tumbling windows are spelled as hopping with hop == size."""
        if self.kind is WindowKind.TUMBLING:
            return WindowSpec(WindowKind.HOPPING, self.size_ms, self.size_ms)
        return self

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "size_ms": self.size_ms}
        if self.kind is WindowKind.HOPPING:
            d["hop_ms"] = self.hop_ms
        if self.lag_ms:
            d["lag_ms"] = self.lag_ms
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "WindowSpec":
        return cls(WindowKind(d["kind"]), int(d["size_ms"]), d.get("hop_ms"), int(d.get("lag_ms", 0)))


_OPS = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}
_OP_ALIASES = {"==": "=", "≠": "!=", "<>": "!=", "≤": "<=", "≥": ">="}


@dataclass(frozen=True)
class Comparison:
    field: str
    op: str
    value: Any

    def __post_init__(self):
        op = _OP_ALIASES.get(self.op, self.op)
        if op not in _OPS:
            raise ValueError(f"unknown comparison operator {self.op!r}")
        object.__setattr__(self, "op", op)

    def sort_key(self):
        return (self.field, self.op, type(self.value).__name__, repr(self.value))


@dataclass(frozen=True)
class Predicate:
    """Conjunction of field comparisons against constants."""

    terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(sorted(set(self.terms), key=Comparison.sort_key)))
        object.__setattr__(self, "_compiled", tuple((t.field, _OPS[t.op], t.value) for t in self.terms))

    @classmethod
    def of(cls, *terms) -> "Predicate":
        return cls(tuple(t if isinstance(t, Comparison) else Comparison(*t) for t in terms))

    @property
    def fields(self) -> set:
        return {t.field for t in self.terms}

    def matches(self, fields: Mapping) -> bool:
        """Raises KeyError when a referenced field is missing."""
        for name, fn, const in self._compiled:
            try:
                if not fn(fields[name], const):
                    return False
            except TypeError:
                return False
        return True

    def to_list(self) -> list:
        return [[t.field, t.op, t.value] for t in self.terms]

    @classmethod
    def parse(cls, spec) -> "Predicate | None":
        if spec is None or spec == [] or spec == "":
            return None
        if isinstance(spec, str):
            spec = [s for s in re.split(r"\s+and\s+", spec.strip(), flags=re.I)]
        terms = []
        for item in spec:
            if isinstance(item, str):
                m = re.fullmatch(r"\s*(\w+)\s*(==|!=|<>|<=|>=|=|<|>|≠|≤|≥)\s*(.+?)\s*", item)
                if not m:
                    raise ValueError(f"cannot parse filter term {item!r}")
                terms.append(Comparison(m.group(1), m.group(2), _parse_literal(m.group(3))))
            elif isinstance(item, Mapping):
                terms.append(Comparison(item["field"], item["op"], item["value"]))
            else:
                terms.append(Comparison(*item))
        return cls(tuple(terms))


def _parse_literal(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip("'\"")


class AggKind(str, Enum):
    COUNT = "count"
    SUM = "sum"
    AVG = "avg"
    DISTINCT_COUNT = "distinct_count"


@dataclass(frozen=True)
class Aggregation:
    kind: AggKind
    field: str | None = None

    def __post_init__(self):
        kind = AggKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is AggKind.COUNT:
            object.__setattr__(self, "field", None)
        elif not self.field:
            raise ValueError(f"{kind.value} needs a field")

    @classmethod
    def parse(cls, text: str) -> "Aggregation":
        m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*([\w*]*)\s*\))?\s*", text)
        if not m:
            raise ValueError(f"cannot parse aggregation {text!r}")
        kind = m.group(1).lower()
        if kind in ("distinct", "count_distinct"):
            kind = "distinct_count"
        arg = m.group(2)
        return cls(AggKind(kind), None if arg in (None, "", "*") else arg)

    def __str__(self) -> str:
        return "count(*)" if self.field is None else f"{self.kind.value}({self.field})"


@dataclass(frozen=True)
class MetricSpec:
    metric_id: str
    window: WindowSpec
    group_by: tuple
    aggregation: Aggregation
    filter: Predicate | None = None

    def __post_init__(self):
        object.__setattr__(self, "group_by", tuple(self.group_by))
        if isinstance(self.aggregation, str):
            object.__setattr__(self, "aggregation", Aggregation.parse(self.aggregation))
        if self.filter is not None and not isinstance(self.filter, Predicate):
            object.__setattr__(self, "filter", Predicate.parse(self.filter))

    def referenced_fields(self) -> set:
        names = set(self.group_by)
        if self.aggregation.field:
            names.add(self.aggregation.field)
        if self.filter is not None:
            names |= self.filter.fields
        return names

    def to_dict(self) -> dict:
        d = {
            "metric_id": self.metric_id,
            "window": self.window.to_dict(),
            "group_by": list(self.group_by),
            "aggregation": str(self.aggregation),
        }
        if self.filter is not None:
            d["filter"] = self.filter.to_list()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricSpec":
        return cls(
            d["metric_id"],
            WindowSpec.from_dict(d["window"]),
            tuple(d["group_by"]),
            Aggregation.parse(d["aggregation"]),
            Predicate.parse(d.get("filter")),
        )


@dataclass(frozen=True)
class TopicSpec:
    name: str
    routing_keys: tuple
    partitions: int = 1

    def __post_init__(self):
        object.__setattr__(self, "routing_keys", tuple(self.routing_keys))

    def covers(self, metric: MetricSpec) -> bool:
        return set(self.routing_keys) <= set(metric.group_by)


@dataclass(frozen=True)
class StreamConfig:
    stream_id: str
    schema: Mapping
    metrics: tuple = ()
    topics: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "schema", dict(self.schema))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        object.__setattr__(self, "topics", tuple(self.topics))

    def topic_for(self, metric: MetricSpec) -> TopicSpec | None:
        """First configured topic whose routing keys are a subset of the metric's group-by."""
        for t in self.topics:
            if t.covers(metric):
                return t
        return None

    def metrics_for_topic(self, topic_name: str) -> list:
        return [m for m in self.metrics if (t := self.topic_for(m)) is not None and t.name == topic_name]

    def topic(self, name: str) -> TopicSpec:
        for t in self.topics:
            if t.name == name:
                return t
        raise KeyError(name)

    def largest_window_ms(self) -> int:
        return max((m.window.size_ms + m.window.lag_ms for m in self.metrics), default=0)

    def validate_event(self, fields: Mapping) -> list:
        problems = []
        for name, type_name in self.schema.items():
            if name not in fields:
                problems.append(f"{name}: missing")
                continue
            v = fields[name]
            expected = SCALAR_TYPES[type_name]
            if expected is float:
                ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
            elif expected is int:
                ok = isinstance(v, int) and not isinstance(v, bool)
            else:
                ok = isinstance(v, expected)
            if not ok:
                problems.append(f"{name}: expected {type_name}, got {type(v).__name__} {v!r}")
        for name in fields:
            if name not in self.schema:
                problems.append(f"{name}: not in schema")
        return problems

    def to_dict(self) -> dict:
        return {
            "stream_id": self.stream_id,
            "schema": dict(self.schema),
            "metrics": [m.to_dict() for m in self.metrics],
            "topics": [
                {"name": t.name, "routing_keys": list(t.routing_keys), "partitions": t.partitions}
                for t in self.topics
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StreamConfig":
        return cls(
            d["stream_id"],
            d.get("schema", {}),
            tuple(MetricSpec.from_dict(m) for m in d.get("metrics", ())),
            tuple(TopicSpec(t["name"], tuple(t["routing_keys"]), int(t.get("partitions", 1))) for t in d.get("topics", ())),
        )

    def dumps(self) -> str:
        """Canonical serialized form: sorted-key JSON."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def loads(cls, text: str) -> "StreamConfig":
        return cls.from_dict(yaml.safe_load(text))

    @classmethod
    def load(cls, path) -> "StreamConfig":
        return cls.loads(Path(path).read_text())


def window_contains(t_i: int, t_eval: int, w_s: int) -> bool:
    return t_eval - w_s <= t_i < t_eval


def sliding_eval_point(t_new: int) -> int:
    """Evaluation instant right after an arrival at ``t_new`` (1 ms granularity)."""
    return t_new + 1


def validate_config(cfg: StreamConfig) -> list:
    violations = []
    schema = cfg.schema
    for name, type_name in schema.items():
        if type_name not in SCALAR_TYPES:
            violations.append(f"schema field {name!r}: unknown type {type_name!r}")
    seen_topics = set()
    for t in cfg.topics:
        if t.name in seen_topics:
            violations.append(f"topic {t.name!r}: duplicate name")
        seen_topics.add(t.name)
        if t.partitions < 1:
            violations.append(f"topic {t.name!r}: partitions must be >= 1")
        if not t.routing_keys:
            violations.append(f"topic {t.name!r}: no routing keys")
        for k in t.routing_keys:
            if k not in schema:
                violations.append(f"topic {t.name!r}: routing key {k!r} not in schema")
    seen_metrics = set()
    for m in cfg.metrics:
        where = f"metric {m.metric_id!r}"
        if m.metric_id in seen_metrics:
            violations.append(f"{where}: duplicate metric_id")
        seen_metrics.add(m.metric_id)
        if not m.group_by:
            violations.append(f"{where}: group_by is empty")
        for f in m.referenced_fields():
            if f not in schema:
                violations.append(f"{where}: field {f!r} not in schema")
        agg = m.aggregation
        if agg.kind in (AggKind.SUM, AggKind.AVG) and schema.get(agg.field) not in (None, "int", "float"):
            violations.append(f"{where}: {agg.kind.value} over non-numeric field {agg.field!r}")
        if cfg.topic_for(m) is None:
            violations.append(f"{where}: no topic whose routing keys are a subset of group_by {list(m.group_by)}")
    return violations
