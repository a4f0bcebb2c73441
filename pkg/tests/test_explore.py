import pytest

from shardocc.errors import BudgetExceeded, DomainError
from shardocc.explore import ORI_OFF, ORI_ON, count_schedules, enumerate_schedules, interleavings


def test_interleavings_count_matches_multinomial():
    seqs = list(interleavings([2, 3]))
    assert len(seqs) == count_schedules(2, 0) * 0 + 10
    assert len(set(seqs)) == 10
    assert count_schedules(2, 3) == 20
    assert len(list(interleavings([3, 3]))) == 20


def test_small_instance_on_is_clean():
    r = enumerate_schedules(2, 2, 1, ORI_ON)
    assert r.schedules == count_schedules(2, 3)
    assert r.violation_total == 0 and r.src_committed == 0
    assert r.invariant_failures == []


def test_minimal_shared_race_off():
    r = enumerate_schedules(2, 1, 1, ORI_OFF, "shared")
    assert r.violations.get("SrcPresent", 0) >= 1


def test_shared_race_on_is_rejected_not_committed():
    r = enumerate_schedules(2, 1, 1, ORI_ON, "shared")
    assert r.violation_total == 0
    assert r.src_histories >= 1 and r.src_committed == 0


@pytest.mark.parametrize("mode", [ORI_ON, ORI_OFF])
def test_single_agent_never_violates(mode):
    r = enumerate_schedules(1, 1, 3, mode)
    assert r.schedules == 1 and r.violation_total == 0


def test_dedicated_off_finds_stale_acceptance():
    r = enumerate_schedules(2, 2, 1, ORI_OFF, "dedicated")
    assert r.violations.get("CrossShardStaleAccepted", 0) >= 1
    assert r.first_violation


def test_deterministic():
    a = enumerate_schedules(2, 2, 1, ORI_OFF, "shared").to_dict()
    b = enumerate_schedules(2, 2, 1, ORI_OFF, "shared").to_dict()
    assert a == b


def test_bounds():
    with pytest.raises(DomainError):
        enumerate_schedules(4, 1, 1)
    with pytest.raises(BudgetExceeded):
        enumerate_schedules(3, 3, 3, max_schedules=1000)
    with pytest.raises(BudgetExceeded):
        enumerate_schedules(2, 2, 2, max_states=10)
