import math

import pytest

from shardocc.acp import CommitRequest, Status, commit
from shardocc.delivery_log import INFINITE_TTL, DeliveryLog
from shardocc.errors import SessionExpired
from shardocc.registry import Registry


def test_log_is_append_only():
    log = DeliveryLog(clock=lambda: 0)
    log.record("alpha", "k", 3)
    log.record("alpha", "k", 4)
    assert [(e.key, e.version) for e in log.entries("alpha")] == [("k", 3), ("k", 4)]


def test_sessions_are_isolated():
    log = DeliveryLog(clock=lambda: 0)
    log.record("alpha", "k", 3)
    assert log.entries("beta") == []
    assert log.effective_read_set("beta", "other") == {}


def test_explicit_entries_take_precedence():
    log = DeliveryLog(clock=lambda: 0)
    log.record("alpha", "a", 1)
    log.record("alpha", "b", 2)
    assert log.effective_read_set("alpha", "c", {"a": 5}) == {"a": 5, "b": 2}


def test_empty_log_gives_empty_read_set():
    log = DeliveryLog(clock=lambda: 0)
    log.record("alpha", "a", 1)
    log.clear()
    assert log.effective_read_set("alpha", "a") == {}


def test_latest_log_entry_wins():
    log = DeliveryLog(clock=lambda: 0)
    log.record("alpha", "a", 1)
    log.record("alpha", "a", 3)
    assert log.effective_read_set("alpha", "x") == {"a": 3}


def test_latest_entry_matches_replay_of_recording_schedules():
    # replay every ordering of three reads of one key and compare with "last read wins"
    from itertools import permutations

    for order in permutations([1, 2, 3]):
        log = DeliveryLog(clock=lambda: 0)
        for v in order:
            log.record("alpha", "a", v)
        assert log.effective_read_set("alpha", "x") == {"a": order[-1]}


def test_commit_key_is_kept_in_read_set():
    log = DeliveryLog(clock=lambda: 0)
    log.record("alpha", "own", 2)
    assert log.effective_read_set("alpha", "own") == {"own": 2}


def test_expire_with_no_sessions():
    assert DeliveryLog(ttl=10, clock=lambda: 0).expire_sessions() == 0


def test_expired_session_rejects_commit(clock):
    reg = Registry(session_ttl=100, clock=clock)
    reg.create_shard("k", "")
    reg.read_shard("k", "alpha")
    clock.now = 101
    assert reg.expire_sessions() == 1
    out = commit(reg, CommitRequest("k", 1, "x", "alpha"))
    assert out.status is Status.SESSION_EXPIRED
    assert reg.counters.session_expired == 1
    assert reg.version_of("k") == 1
    # a fresh GET opens a new session
    reg.read_shard("k", "alpha")
    assert commit(reg, CommitRequest("k", 1, "x", "alpha")).ok


def test_aged_session_expires_without_sweep(clock):
    log = DeliveryLog(ttl=50, clock=clock)
    log.record("alpha", "a", 1)
    clock.now = 50
    assert log.effective_read_set("alpha", "b") == {"a": 1}
    clock.now = 51
    with pytest.raises(SessionExpired):
        log.effective_read_set("alpha", "b")


def test_infinite_ttl_never_expires(clock):
    log = DeliveryLog(ttl=INFINITE_TTL, clock=clock)
    log.record("alpha", "a", 1)
    clock.now = 10**15
    assert log.expire_sessions() == 0
    assert log.effective_read_set("alpha", "b") == {"a": 1}
    assert math.isinf(log.session("alpha").ttl)


def test_export_shape():
    log = DeliveryLog(clock=lambda: 7)
    log.record("alpha", "a", 1)
    assert log.export() == {"alpha": [["a", 1, 7]]}
