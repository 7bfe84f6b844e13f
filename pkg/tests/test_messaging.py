import time

import pytest
from hypothesis import given, settings, strategies as st

from slidewin.messaging import (
    CommitRegressionError, DuplicateTopicError, Log, NotAssignedError, OffsetOutOfRangeError, Record,
    TopicPartition, UnknownTopicError,
)


@pytest.fixture
def log(tmp_path):
    lg = Log(tmp_path / "log", fsync=False)
    yield lg
    lg.close()


def test_append_assigns_dense_offsets_and_reads_back(log):
    tps = log.create_topic("t", 2)
    offs = [log.append(tps[0], Record(b"k", f"v{i}".encode())) for i in range(5)]
    assert offs == list(range(5))
    assert log.append(tps[1], Record(b"", b"x")) == 0
    got = log.read(tps[0], 2, 2)
    assert [(o, r.payload) for o, r in got] == [(2, b"v2"), (3, b"v3")]
    assert log.read(tps[0], 5) == []


def test_topic_errors(log):
    log.create_topic("t", 1)
    with pytest.raises(DuplicateTopicError):
        log.create_topic("t", 1)
    with pytest.raises(UnknownTopicError):
        log.append(TopicPartition("nope", 0), Record(b"", b"x"))
    with pytest.raises(UnknownTopicError):
        log.append(TopicPartition("t", 3), Record(b"", b"x"))
    with pytest.raises(ValueError):
        Record(b"", b"")


@settings(max_examples=25)
@given(st.lists(st.tuples(st.binary(max_size=8), st.binary(min_size=1, max_size=64)), max_size=30))
def test_log_survives_restart(tmp_path_factory, records):
    root = tmp_path_factory.mktemp("log")
    lg = Log(root, fsync=False)
    tp = lg.create_topic("t", 1)[0]
    for k, v in records:
        lg.append(tp, Record(k, v))
    lg.close()
    lg2 = Log(root, fsync=False)
    assert [(r.key, r.payload) for _, r in lg2.read(tp, 0)] == records
    lg2.close()


def test_torn_tail_is_truncated(tmp_path):
    lg = Log(tmp_path, fsync=False)
    tp = lg.create_topic("t", 1)[0]
    for i in range(3):
        lg.append(tp, Record(b"", b"payload-%d" % i))
    lg.close()
    seg = tmp_path / "t" / "0" / "segment.log"
    seg.write_bytes(seg.read_bytes()[:-4])
    lg2 = Log(tmp_path, fsync=False)
    assert lg2.next_offset(tp) == 2
    assert lg2.append(tp, Record(b"", b"again")) == 2
    lg2.close()


def test_commit_rules(log):
    tp = log.create_topic("t", 1)[0]
    g = log.consumer_group("g", ["t"])
    for _ in range(3):
        log.append(tp, Record(b"", b"x"))
    g.commit(tp, 2)
    assert g.committed(tp) == 2
    with pytest.raises(CommitRegressionError):
        g.commit(tp, 1)
    with pytest.raises(OffsetOutOfRangeError):
        g.commit(tp, 4)


def test_round_robin_assignment_and_handover(log):
    log.create_topic("a", 3)
    log.create_topic("b", 2)
    g = log.consumer_group("g", ["a", "b"], session_timeout=60)
    m1 = g.join("m1")
    m2 = g.join("m2")
    m1.poll(timeout=0)
    m2.poll(timeout=0)
    assert set(m1.owned) | set(m2.owned) == set(g.all_partitions())
    assert not set(m1.owned) & set(m2.owned)
    assert abs(len(m1.owned) - len(m2.owned)) <= 1
    m2.close()
    m1.poll(timeout=0)
    assert m1.owned == g.all_partitions()


def test_partition_is_not_granted_until_revoked(log):
    log.create_topic("a", 2)
    g = log.consumer_group("g", ["a"], session_timeout=60)
    m1 = g.join("m1")
    m1.poll(timeout=0)
    assert len(m1.owned) == 2
    m2 = g.join("m2")
    m2.poll(timeout=0)
    assert m2.owned == []          # m1 still holds both until it polls
    m1.poll(timeout=0)
    m2.poll(timeout=0)
    assert len(m1.owned) == len(m2.owned) == 1


def test_poll_resumes_from_committed_offset(log):
    tp = log.create_topic("a", 1)[0]
    for i in range(10):
        log.append(tp, Record(b"", bytes([i + 1])))
    g = log.consumer_group("g", ["a"], session_timeout=60)
    g.commit(tp, 4)
    m = g.join("m")
    recs = m.poll(max_records=100, timeout=0)
    assert [o for _, o, _ in recs] == list(range(4, 10))
    m.seek(tp, 8)
    assert [o for _, o, _ in m.poll(timeout=0)] == [8, 9]
    with pytest.raises(OffsetOutOfRangeError):
        m.seek(tp, 11)


def test_silent_member_is_evicted_after_session_timeout(log):
    log.create_topic("a", 2)
    g = log.consumer_group("g", ["a"], session_timeout=0.1)
    dead = g.join("dead")
    live = g.join("live")
    dead.poll(timeout=0)
    live.poll(timeout=0)
    time.sleep(0.15)
    live.poll(timeout=0)
    assert g.live_members() == ["live"]
    live.poll(timeout=0)
    assert len(live.owned) == 2
    with pytest.raises(NotAssignedError):
        dead.poll(timeout=0)


def test_poll_blocks_until_data(log):
    tp = log.create_topic("a", 1)[0]
    m = log.consumer_group("g", ["a"]).join("m")
    t0 = time.monotonic()
    assert m.poll(timeout=0.1) == []
    assert time.monotonic() - t0 >= 0.09
    log.append(tp, Record(b"", b"x"))
    assert len(m.poll(timeout=1)) == 1


def test_fsync_flusher_runs(tmp_path):
    lg = Log(tmp_path, fsync=True, fsync_interval_ms=1, fsync_batch=2)
    tp = lg.create_topic("a", 1)[0]
    for _ in range(5):
        lg.append(tp, Record(b"", b"x"))
    deadline = time.monotonic() + 2
    while lg._partition(tp).unsynced and time.monotonic() < deadline:
        time.sleep(0.01)
    assert lg._partition(tp).unsynced == 0
    lg.close()
