"""Exhaustive interleaving of small agent scripts against the real registry.

Each agent runs a fixed script for ``steps`` rounds: GET every shard, then
commit ``content + marker`` to its own shard (dedicated topology) or to
shard 0 (shared topology), expecting the version it just read. Every
interleaving of those whole operations is replayed on a fresh registry, the
resulting history is checked for legality and structural races, and state
invariants are checked after every operation.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Tuple

from .acp import CommitRequest, submit
from .errors import BudgetExceeded, DomainError
from .history import EventKind, History, ViolationKind, contains_src, is_ori_legal
from .registry import Registry

ORI_ON = "ORI-ON"
ORI_OFF = "ORI-OFF"


@dataclass
class EnumerationReport:
    agents: int
    shards: int
    steps: int
    mode: str
    topology: str
    schedules: int = 0
    states_visited: int = 0
    violations: Dict[str, int] = field(default_factory=dict)
    src_histories: int = 0
    src_committed: int = 0
    stale_commits_rejected: int = 0
    invariant_failures: List[str] = field(default_factory=list)
    first_violation: Tuple = ()

    @property
    def violation_total(self) -> int:
        return sum(self.violations.values())

    def to_dict(self) -> dict:
        return {
            "agents": self.agents, "shards": self.shards, "steps": self.steps,
            "mode": self.mode, "topology": self.topology,
            "schedules": self.schedules, "states_visited": self.states_visited,
            "violations": dict(sorted(self.violations.items())),
            "src_histories": self.src_histories, "src_committed": self.src_committed,
            "stale_commits_rejected": self.stale_commits_rejected,
            "invariant_failures": self.invariant_failures[:10],
            "first_violation": list(self.first_violation),
        }


def count_schedules(agents: int, ops_per_agent: int) -> int:
    total = agents * ops_per_agent
    return math.factorial(total) // math.factorial(ops_per_agent) ** agents


def interleavings(counts: List[int]) -> Iterator[Tuple[int, ...]]:
    """All sequences containing agent ``i`` exactly ``counts[i]`` times, in lexicographic order."""
    remaining = list(counts)
    total = sum(counts)
    prefix: List[int] = []

    def rec():
        if len(prefix) == total:
            yield tuple(prefix)
            return
        for agent, left in enumerate(remaining):
            if left:
                remaining[agent] -= 1
                prefix.append(agent)
                yield from rec()
                prefix.pop()
                remaining[agent] += 1

    yield from rec()


class _Agent:
    def __init__(self, index: int, shards: List[str], target: str):
        self.name = f"a{index + 1}"
        self.shards = shards
        self.target = target
        self.pc = 0
        self.seen: Dict[str, Tuple[str, int]] = {}

    @property
    def ops_per_step(self) -> int:
        return len(self.shards) + 1

    def step(self, registry: Registry, ori_enabled: bool, problems: List[str]):
        slot = self.pc % self.ops_per_step
        round_no = self.pc // self.ops_per_step
        self.pc += 1
        if slot < len(self.shards):
            key = self.shards[slot]
            content, version = registry.read_shard(key, self.name, now=0)
            logged = registry.log.entries(self.name)[-1]
            if (logged.key, logged.version) != (key, version):
                problems.append(f"{self.name} GET {key} returned v{version} but logged {logged}")
            self.seen[key] = (content, version)
            return
        content, version = self.seen[self.target]
        req = CommitRequest(
            key=self.target,
            expected_version=version,
            delta=f"{content}[{self.name}:{round_no}]",
            agent=self.name,
        )
        submit(registry, req, ori_enabled=ori_enabled, now=0)


def _state_key(registry: Registry, agents: List[_Agent]):
    return (
        tuple(a.pc for a in agents),
        tuple(sorted((k, s.version, s.content) for k, s in registry.shards.items())),
        tuple(tuple((e.key, e.version) for e in registry.log.entries(a.name)) for a in agents),
    )


def enumerate_schedules(
    agents: int,
    shards: int,
    steps: int,
    mode: str = ORI_ON,
    topology: str = "dedicated",
    *,
    max_states: int = 2_000_000,
    max_schedules: int = 250_000,
) -> EnumerationReport:
    for name, value in (("agents", agents), ("shards", shards), ("steps", steps)):
        if not 1 <= value <= 3:
            raise DomainError(f"{name} must be between 1 and 3, got {value}")
    if mode not in (ORI_ON, ORI_OFF):
        raise DomainError(f"unknown mode {mode!r}")
    if topology not in ("dedicated", "shared"):
        raise DomainError(f"unknown topology {topology!r}")
    ori_enabled = mode == ORI_ON
    keys = [f"s{i + 1}" for i in range(shards)]
    ops = steps * (shards + 1)
    total = count_schedules(agents, ops)
    if total > max_schedules:
        raise BudgetExceeded(max_schedules, total)

    report = EnumerationReport(agents, shards, steps, mode, topology)
    seen_states = set()
    kinds: Counter = Counter()
    for schedule in interleavings([ops] * agents):
        history = History()
        registry = Registry(history=history, clock=lambda: 0)
        for key in keys:
            registry.create_shard(key, "")
        actors = [
            _Agent(i, keys, keys[i % shards] if topology == "dedicated" else keys[0])
            for i in range(agents)
        ]
        seen_states.add(_state_key(registry, actors))
        for who in schedule:
            actors[who].step(registry, ori_enabled, report.invariant_failures)
            report.invariant_failures.extend(registry.check_invariants())
            seen_states.add(_state_key(registry, actors))
            if len(seen_states) > max_states:
                raise BudgetExceeded(max_states, len(seen_states))
        report.schedules += 1

        events = history.events
        legal, violations = is_ori_legal(events)
        for v in violations:
            kinds[v.kind.value] += 1
        if violations and not report.first_violation:
            report.first_violation = (schedule, violations[0].kind.value, violations[0].evidence)
        for key in keys:
            present, _ = contains_src(events, key)
            if present:
                report.src_histories += 1
                break
        report.src_committed += sum(1 for v in violations if v.kind is ViolationKind.SRC_PRESENT)
        report.stale_commits_rejected += sum(
            1 for e in events if e.kind is EventKind.COMMIT_REJECT and e.code == "CrossShardStale"
        )
    report.states_visited = len(seen_states)
    report.violations = dict(kinds)
    return report
