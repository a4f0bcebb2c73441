"""Atomic commit path, last-writer-wins baseline, retry-budget arithmetic and WAL replay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Mapping, Optional

from .errors import DomainError, SessionExpired, UnknownKey
from .history import EventKind
from .registry import Counters, Registry, RegistrySnapshot
from .wal import WalRecord, replay_records


class Status(str, Enum):
    OK = "Ok"
    CROSS_SHARD_STALE = "CrossShardStale"
    VERSION_MISMATCH = "VersionMismatch"
    SESSION_EXPIRED = "SessionExpired"
    OWNERSHIP_VIOLATION = "OwnershipViolation"


@dataclass(frozen=True)
class CommitRequest:
    key: str
    expected_version: int
    delta: str
    agent: str
    explicit_read_set: Optional[Mapping[str, int]] = None

    def __post_init__(self):
        if self.expected_version < 1:
            raise DomainError(f"expected_version must be >= 1, got {self.expected_version}")


@dataclass(frozen=True)
class CommitOutcome:
    status: Status
    new_version: Optional[int] = None
    stale_key: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status is Status.OK


def _first_divergent(registry: Registry, key: str, reads: Dict[str, int]) -> Optional[str]:
    for other in sorted(reads):
        if other != key and registry.version_of(other) != reads[other]:
            return other
    return None


def _reject(registry, req, status, reads=None, stale_key=None):
    c = registry.counters
    c.rejects += 1
    if status is Status.CROSS_SHARD_STALE:
        c.cross_shard_stale += 1
    elif status is Status.VERSION_MISMATCH:
        c.version_mismatch += 1
    elif status is Status.OWNERSHIP_VIOLATION:
        c.ownership_violations += 1
    elif status is Status.SESSION_EXPIRED:
        c.session_expired += 1
    if registry.history is not None:
        registry.history.append(
            EventKind.COMMIT_REJECT, req.agent, req.key, req.expected_version,
            read_set=reads, expected_version=req.expected_version, code=status.value,
        )
    return CommitOutcome(status, stale_key=stale_key)


def _apply(registry, req, reads, divergent):
    shard = registry.shards[req.key]
    shard.content = req.delta
    shard.version += 1
    if registry.wal is not None:
        registry.wal.append(req.key, shard.version, req.agent, shard.content)
    c = registry.counters
    c.commits += 1
    if divergent is not None:
        c.accepted_divergent_commits += 1
    if registry.history is not None:
        registry.history.append(
            EventKind.COMMIT_OK, req.agent, req.key, shard.version,
            read_set=reads, expected_version=req.expected_version,
        )
    return CommitOutcome(Status.OK, new_version=shard.version)


def _validate_views(registry, req, now):
    """Build the effective read-set and run the divergence counters.

    Returns ``(reads, first_divergent_key)``.
    """
    reads = registry.log.effective_read_set(req.agent, req.key, req.explicit_read_set, now)
    divergent = _first_divergent(registry, req.key, reads)
    registry.counters.view_checked_commits += 1
    if divergent is not None:
        registry.counters.view_divergent_commits += 1
    return reads, divergent


def commit(registry: Registry, req: CommitRequest, now: Optional[int] = None) -> CommitOutcome:
    """Validated commit: cross-shard freshness, then expected version, then mutate.

    Everything happens under one exclusive hold of the registry guard; a
    rejection changes nothing but the reject and view counters.
    """
    with registry.guard.write():
        shard = registry.shards.get(req.key)
        if shard is None:
            raise UnknownKey(req.key)
        try:
            reads, divergent = _validate_views(registry, req, now)
        except SessionExpired:
            return _reject(registry, req, Status.SESSION_EXPIRED)
        if divergent is not None:
            return _reject(registry, req, Status.CROSS_SHARD_STALE, reads, stale_key=divergent)
        if shard.version != req.expected_version:
            return _reject(registry, req, Status.VERSION_MISMATCH, reads)
        if shard.enforce_ownership:
            owner = registry.token_owner(req.key)
            if owner is not None and owner != req.agent:
                return _reject(registry, req, Status.OWNERSHIP_VIOLATION, reads)
        registry.insert_token(req.key, req.agent)
        return _apply(registry, req, reads, None)


def commit_lww(registry: Registry, req: CommitRequest, now: Optional[int] = None) -> CommitOutcome:
    """Last-writer-wins commit: no staleness or version check, always Ok.

    Divergence counters still run, so the number of stale commits that slipped
    through is observable.
    """
    with registry.guard.write():
        if req.key not in registry.shards:
            raise UnknownKey(req.key)
        try:
            reads, divergent = _validate_views(registry, req, now)
        except SessionExpired:
            reads, divergent = dict(req.explicit_read_set or {}), None
        registry.insert_token(req.key, req.agent)
        return _apply(registry, req, reads, divergent)


def submit(registry: Registry, req: CommitRequest, *, ori_enabled: bool = True,
           now: Optional[int] = None) -> CommitOutcome:
    if ori_enabled:
        return commit(registry, req, now)
    return commit_lww(registry, req, now)


def required_retry_budget(scr: float, target: float = 0.95) -> int:
    """Least K with ``1 - scr**K >= target`` for i.i.d. conflicts at rate ``scr``."""
    if not 0.0 <= scr < 1.0:
        raise DomainError(f"scr must lie in [0, 1), got {scr}")
    if not 0.0 < target < 1.0:
        raise DomainError(f"target must lie in (0, 1), got {target}")
    if scr == 0.0:
        return 1
    k = max(1, math.ceil(math.log(1.0 - target) / math.log(scr)))
    # guard the ceiling against floating-point error at exact boundaries
    while k > 1 and 1.0 - scr ** (k - 1) >= target:
        k -= 1
    while 1.0 - scr ** k < target:
        k += 1
    return k


def success_probability(scr: float, attempts: int) -> float:
    return 1.0 - scr ** attempts


def replay_wal(records: Iterable[WalRecord]) -> RegistrySnapshot:
    """Rebuild a snapshot from WAL records.

    Entries map each key to ``(version, content)``; content is the stored
    text when the WAL kept it, otherwise the hex digest of the committed
    content (compare with :func:`shardocc.wal.content_digest`).
    """
    state, contents = replay_records(records)
    entries = {}
    for key, (version, digest) in state.items():
        entries[key] = (version, contents.get(key, digest.hex()))
    return RegistrySnapshot(entries=entries, counters=Counters())
