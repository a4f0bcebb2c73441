import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardocc.acp import (
    CommitRequest, Status, commit, commit_lww, required_retry_budget, submit, success_probability,
)
from shardocc.errors import DomainError, UnknownKey
from shardocc.registry import Registry


def _advance(reg, key, agent, times=1):
    for _ in range(times):
        content, v = reg.read_shard(key, agent)
        assert commit(reg, CommitRequest(key, v, content + "+", agent)).ok


@pytest.fixture
def schema_registry(registry):
    registry.create_shard("db_schema", "PostgreSQL dialect")
    registry.create_shard("migration_script", "")
    _advance(registry, "db_schema", "a1", times=2)  # db_schema at v3
    return registry


def test_stale_sibling_rejected_naming_it(schema_registry):
    reg = schema_registry
    assert reg.read_shard("db_schema", "a2")[1] == 3
    _, mv = reg.read_shard("migration_script", "a2")
    _advance(reg, "db_schema", "a1")  # now v4
    out = commit(reg, CommitRequest("migration_script", mv, "ALTER ...", "a2"))
    assert out.status is Status.CROSS_SHARD_STALE
    assert out.stale_key == "db_schema"
    assert reg.counters.cross_shard_stale == 1


def test_fresh_reads_commit(schema_registry):
    reg = schema_registry
    reg.read_shard("db_schema", "a2")
    _, mv = reg.read_shard("migration_script", "a2")
    out = commit(reg, CommitRequest("migration_script", mv, "ALTER ...", "a2"))
    assert out.ok and out.new_version == mv + 1
    assert reg.read_shard("migration_script", "a3") == ("ALTER ...", mv + 1)


def test_first_stale_sibling_in_key_order(registry):
    for key in ("own", "b", "a"):
        registry.create_shard(key, "")
    for key in ("own", "b", "a"):
        registry.read_shard(key, "me")
    _advance(registry, "b", "other-b")
    _advance(registry, "a", "other-a")
    out = commit(registry, CommitRequest("own", 1, "x", "me"))
    assert out.stale_key == "a"


def test_version_mismatch(registry):
    registry.create_shard("k", "")
    registry.read_shard("k", "a1")
    out = commit(registry, CommitRequest("k", 5, "x", "a1"))
    assert out.status is Status.VERSION_MISMATCH
    assert registry.counters.version_mismatch == 1


def test_unknown_key(registry):
    with pytest.raises(UnknownKey):
        commit(registry, CommitRequest("nope", 1, "x", "a1"))
    with pytest.raises(UnknownKey):
        commit_lww(registry, CommitRequest("nope", 1, "x", "a1"))


def test_expected_version_domain():
    with pytest.raises(DomainError):
        CommitRequest("k", 0, "x", "a1")


def test_explicit_read_set_overrides_log(registry):
    registry.create_shard("own", "")
    registry.create_shard("ref", "")
    registry.read_shard("ref", "me")
    _advance(registry, "ref", "other")
    # a complete explicit declaration makes the stale log entry irrelevant
    out = commit(registry, CommitRequest("own", 1, "x", "me", {"ref": 2}))
    assert out.ok


def test_rejection_changes_nothing_but_reject_counters(schema_registry, tmp_path):
    from shardocc.wal import WalWriter

    reg = schema_registry
    reg.wal = WalWriter(tmp_path / "wal")
    reg.read_shard("db_schema", "a2")
    reg.read_shard("migration_script", "a2")
    _advance(reg, "db_schema", "a1")
    before = reg.snapshot(include_logs=True)
    wal_size = (tmp_path / "wal").stat().st_size
    out = commit(reg, CommitRequest("migration_script", 1, "x", "a2"))
    assert not out.ok
    after = reg.snapshot(include_logs=True)
    assert after.entries == before.entries
    assert after.token_owners == before.token_owners
    assert after.delivery_logs == before.delivery_logs
    assert (tmp_path / "wal").stat().st_size == wal_size
    changed = {k for k, v in vars(after.counters).items() if vars(before.counters)[k] != v}
    assert changed == {"rejects", "cross_shard_stale", "view_checked_commits", "view_divergent_commits"}


def test_lww_accepts_stale_and_counts_divergence(schema_registry):
    reg = schema_registry
    reg.read_shard("db_schema", "a2")
    reg.read_shard("migration_script", "a2")
    _advance(reg, "db_schema", "a1")
    out = commit_lww(reg, CommitRequest("migration_script", 1, "x", "a2"))
    assert out.ok and out.new_version == 2
    c = reg.counters
    assert c.view_divergent_commits == 1 and c.accepted_divergent_commits == 1


def test_paired_mode_differential():
    def run(ori_enabled):
        reg = Registry(clock=lambda: 0)
        reg.create_shard("k", "")
        reg.read_shard("k", "a1")
        reg.read_shard("k", "a2")
        submit(reg, CommitRequest("k", 1, "a1", "a1"), ori_enabled=ori_enabled)
        return submit(reg, CommitRequest("k", 1, "a2", "a2"), ori_enabled=ori_enabled), reg

    off, reg_off = run(False)
    on, reg_on = run(True)
    assert off.ok and reg_off.version_of("k") == 3
    assert on.status is Status.VERSION_MISMATCH and reg_on.version_of("k") == 2


def test_lww_keeps_only_last_marker_per_step():
    reg = Registry(clock=lambda: 0)
    reg.create_shard("shared", "")
    for step in range(10):
        reads = {f"a{i}": reg.read_shard("shared", f"a{i}") for i in range(4)}
        for i in range(4):
            content, v = reads[f"a{i}"]
            assert commit_lww(reg, CommitRequest("shared", v, content + f"<{i}:{step}>", f"a{i}")).ok
    final = reg.read_shard("shared", "audit")[0]
    assert final.count("<") == 10


def test_ownership_flag(registry):
    registry.create_shard("k", "", enforce_ownership=True)
    registry.create_shard("free", "")
    registry.read_shard("k", "a1")
    assert commit(registry, CommitRequest("k", 1, "x", "a1")).ok
    registry.read_shard("k", "a2")
    out = commit(registry, CommitRequest("k", 2, "y", "a2"))
    assert out.status is Status.OWNERSHIP_VIOLATION
    assert registry.version_of("k") == 2
    registry.read_shard("free", "b1")
    assert commit(registry, CommitRequest("free", 1, "x", "b1")).ok
    registry.read_shard("free", "b2")
    assert commit(registry, CommitRequest("free", 2, "y", "b2")).ok
    assert registry.token_owner("free") == "b1"


def test_retained_log_entry_does_not_self_stale(registry):
    registry.create_shard("own", "")
    registry.create_shard("other", "")
    registry.read_shard("own", "me")
    assert commit(registry, CommitRequest("own", 1, "x", "me")).ok
    # committing another key after our own commit: own@1 is in the log, own is now v2
    registry.read_shard("other", "me")
    out = commit(registry, CommitRequest("other", 1, "y", "me"))
    assert out.status is Status.CROSS_SHARD_STALE and out.stale_key == "own"


# retry budget --------------------------------------------------------------


def test_budget_no_contention():
    assert required_retry_budget(0.0, 0.95) == 1


def test_budget_at_0869():
    assert required_retry_budget(0.869, 0.95) == 22


def test_budget_formula_at_0856():
    # ceil(ln 0.05 / ln 0.856) = ceil(19.27) = 20
    assert math.ceil(math.log(0.05) / math.log(0.856)) == 20
    assert required_retry_budget(0.856, 0.95) == 20
    assert success_probability(0.856, 19) < 0.95 <= success_probability(0.856, 20)


def test_five_attempts_at_0856():
    assert success_probability(0.856, 5) == pytest.approx(0.5404, abs=1e-4)


@pytest.mark.parametrize("scr", [round(0.1 * i, 1) for i in range(1, 10)])
def test_budget_grid(scr):
    k = required_retry_budget(scr, 0.95)
    assert 1 - scr ** (k - 1) < 0.95 <= 1 - scr ** k


@settings(max_examples=300)
@given(st.floats(0.0, 0.999), st.floats(0.01, 0.99))
def test_budget_is_least_k(scr, target):
    k = required_retry_budget(scr, target)
    assert 1 - scr ** k >= target
    assert k == 1 or 1 - scr ** (k - 1) < target


@pytest.mark.parametrize("scr,target", [(1.0, 0.95), (-0.1, 0.95), (0.5, 0.0), (0.5, 1.0)])
def test_budget_domain(scr, target):
    with pytest.raises(DomainError):
        required_retry_budget(scr, target)
