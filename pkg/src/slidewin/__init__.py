"""Real sliding-window aggregations over a partitioned event log."""

from .model import (
    DAY, HOUR, MINUTE, SECOND, AggKind, Aggregation, Comparison, Event, MetricSpec, Predicate,
    StreamConfig, TopicSpec, WindowKind, WindowSpec, validate_config,
)

__version__ = "0.1.0"
