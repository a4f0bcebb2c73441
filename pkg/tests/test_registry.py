import threading
from itertools import permutations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardocc.acp import CommitRequest, commit
from shardocc.errors import KeyExists, UnknownKey
from shardocc.history import History
from shardocc.registry import Registry


def test_create_starts_at_version_one(registry):
    assert registry.create_shard("db_schema", "PostgreSQL dialect") == 1
    assert registry.read_shard("db_schema", "a1") == ("PostgreSQL dialect", 1)


def test_create_does_not_touch_the_log(registry):
    registry.create_shard("db_schema", "x")
    assert registry.log.agents() == []


def test_duplicate_create_raises(registry):
    registry.create_shard("db_schema", "x")
    with pytest.raises(KeyExists):
        registry.create_shard("db_schema", "y")
    assert registry.read_shard("db_schema", "a1") == ("x", 1)


def test_read_unknown_key(registry):
    with pytest.raises(UnknownKey):
        registry.read_shard("missing", "a1")
    assert registry.log.agents() == []


def test_read_records_before_returning(registry):
    registry.create_shard("db_schema", "x")
    for v in (2, 3):
        commit(registry, CommitRequest("db_schema", v - 1, f"x{v}", "a1"))
    content, version = registry.read_shard("db_schema", "a2")
    assert (content, version) == ("x3", 3)
    last = registry.log.entries("a2")[-1]
    assert (last.key, last.version) == ("db_schema", 3)


def test_repeated_reads_append_two_entries(registry):
    registry.create_shard("k", "c")
    first = registry.read_shard("k", "a1")
    second = registry.read_shard("k", "a1")
    assert first == second
    assert [(e.key, e.version) for e in registry.log.entries("a1")] == [("k", 1), ("k", 1)]


def test_version_of_absent_key_is_zero(registry):
    assert registry.version_of("nope") == 0


def test_snapshot_counters_and_logs(registry):
    registry.create_shard("k", "c")
    registry.read_shard("k", "a1")
    commit(registry, CommitRequest("k", 1, "d", "a1"))
    snap = registry.snapshot(include_logs=True)
    assert snap.versions() == {"k": 2}
    assert snap.counters.gets == 1 and snap.counters.commits == 1
    assert snap.token_owners == {"k": "a1"}
    assert snap.delivery_logs == {"a1": [["k", 1, 0]]}
    assert registry.snapshot().delivery_logs is None


def test_fresh_snapshot_counters_are_zero():
    data = Registry().snapshot().to_dict()
    assert all(v == 0 for v in data["counters"].values())


def test_reset_clears_everything(registry):
    registry.create_shard("k", "c")
    registry.read_shard("k", "a1")
    commit(registry, CommitRequest("k", 1, "d", "a1"))
    registry.reset()
    snap = registry.snapshot(include_logs=True)
    assert snap.entries == {} and snap.token_owners == {} and snap.delivery_logs == {}
    assert snap.counters.commits == 0
    assert len(registry.history) == 0
    with pytest.raises(UnknownKey):
        registry.read_shard("k", "a1")


def test_token_insert_if_absent(registry):
    assert registry.insert_token("k", "a1") == "a1"
    assert registry.insert_token("k", "a2") == "a1"
    assert registry.token_owner("k") == "a1"


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["a1", "a2", "a3"]), st.sampled_from(["x", "y"]),
                          st.booleans()), max_size=40))
def test_versions_only_grow_and_logs_stay_sound(ops):
    reg = Registry(history=History(), clock=lambda: 0)
    for key in ("x", "y"):
        reg.create_shard(key, "")
    seen = {}
    last = {"x": 1, "y": 1}
    for agent, key, is_commit in ops:
        if is_commit and (agent, key) in seen:
            commit(reg, CommitRequest(key, seen[agent, key], agent, agent), now=0)
        else:
            seen[agent, key] = reg.read_shard(key, agent, now=0)[1]
        assert reg.check_invariants() == []
        for k in last:
            assert reg.version_of(k) >= last[k]
            last[k] = reg.version_of(k)
        # per (agent, key) logged versions never go backwards
        for a in reg.log.agents():
            by_key = {}
            for e in reg.log.entries(a):
                assert e.version >= by_key.get(e.key, 0)
                by_key[e.key] = e.version


def test_read_racing_commit_every_order():
    # whole operations are atomic under the guard, so the two orders are all schedules
    for order in permutations(["read", "commit"]):
        reg = Registry(clock=lambda: 0)
        reg.create_shard("k", "old")
        result = None
        for op in order:
            if op == "read":
                result = reg.read_shard("k", "reader")
            else:
                assert commit(reg, CommitRequest("k", 1, "new", "writer")).ok
        assert result in (("old", 1), ("new", 2))
        assert reg.log.entries("reader")[-1].version == result[1]


def test_read_racing_commits_on_threads():
    reg = Registry()
    reg.create_shard("k", "0")
    mismatches = []

    def writer():
        for i in range(300):
            _, v = reg.read_shard("k", "writer")
            commit(reg, CommitRequest("k", v, str(i), "writer"))

    def reader(name):
        for _ in range(300):
            _, v = reg.read_shard("k", name)
            if reg.log.entries(name)[-1].version != v:
                mismatches.append(v)

    threads = [threading.Thread(target=writer)] + [
        threading.Thread(target=reader, args=(f"r{i}",)) for i in range(3)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert mismatches == []
    assert reg.check_invariants() == []
