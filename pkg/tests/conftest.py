import logging
import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", parent=settings.get_profile("default"), max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

logging.getLogger("slidewin").setLevel(logging.ERROR)


@pytest.fixture
def payments_stream():
    from slidewin import StreamConfig

    return StreamConfig.from_dict({
        "stream_id": "payments",
        "schema": {"card": "str", "merchant": "str", "amount": "float"},
        "topics": [
            {"name": "card", "routing_keys": ["card"], "partitions": 10},
            {"name": "merchant", "routing_keys": ["merchant"], "partitions": 10},
        ],
        "metrics": [
            {"metric_id": "q1_sum", "window": {"kind": "sliding", "size_ms": 300000},
             "group_by": ["card"], "aggregation": "sum(amount)"},
            {"metric_id": "q1_count", "window": {"kind": "sliding", "size_ms": 300000},
             "group_by": ["card"], "aggregation": "count(*)"},
            {"metric_id": "q2_avg", "window": {"kind": "sliding", "size_ms": 300000},
             "group_by": ["merchant"], "aggregation": "avg(amount)"},
        ],
    })


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
