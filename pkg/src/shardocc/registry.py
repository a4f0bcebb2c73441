"""Versioned shard store and ownership-token table.

Locking discipline: one registry-wide reader/writer guard and one token
mutex. The token mutex is only ever taken while the registry guard is held
for writing, never the other way round, so the lock-order graph has a single
edge and cannot deadlock.
"""

from __future__ import annotations

import threading
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional, Tuple

from .delivery_log import INFINITE_TTL, DeliveryLog, monotonic_ms
from .errors import KeyExists, UnknownKey
from .history import EventKind, History
from .rwlock import RWLock
from .wal import WalWriter


@dataclass
class Shard:
    key: str
    version: int
    content: str
    enforce_ownership: bool = False


@dataclass
class Counters:
    gets: int = 0
    commits: int = 0
    rejects: int = 0
    cross_shard_stale: int = 0
    version_mismatch: int = 0
    ownership_violations: int = 0
    session_expired: int = 0
    view_checked_commits: int = 0
    view_divergent_commits: int = 0
    # divergent commits that were nonetheless accepted (only possible with validation off)
    accepted_divergent_commits: int = 0


@dataclass
class RegistrySnapshot:
    entries: Dict[str, Tuple[int, str]] = field(default_factory=dict)
    token_owners: Dict[str, str] = field(default_factory=dict)
    counters: Counters = field(default_factory=Counters)
    delivery_logs: Optional[Dict[str, list]] = None

    def versions(self) -> Dict[str, int]:
        return {k: v for k, (v, _) in self.entries.items()}

    def to_dict(self) -> dict:
        data = {
            "entries": {k: {"version": v, "content": c} for k, (v, c) in sorted(self.entries.items())},
            "token_owners": dict(sorted(self.token_owners.items())),
            "counters": asdict(self.counters),
        }
        if self.delivery_logs is not None:
            data["delivery_logs"] = self.delivery_logs
        return data


class Registry:
    """Shard store shared by all clients.

    ``shards``, ``tokens``, ``counters`` and ``log`` are guarded by ``guard``;
    the commit path in :mod:`shardocc.acp` manipulates them directly while
    holding it for writing.
    """

    def __init__(
        self,
        *,
        session_ttl: float = INFINITE_TTL,
        ownership_enforced: bool = False,
        clock: Callable[[], int] = monotonic_ms,
        wal: Optional[WalWriter] = None,
        history: Optional[History] = None,
    ):
        self.guard = RWLock()
        self.token_lock = threading.Lock()
        self.clock = clock
        self.ownership_enforced = ownership_enforced
        self.shards: Dict[str, Shard] = {}
        self.tokens: Dict[str, str] = {}
        self.counters = Counters()
        self.log = DeliveryLog(ttl=session_ttl, clock=clock)
        self.wal = wal
        self.history = history

    def create_shard(self, key: str, initial_content: str, *, enforce_ownership: Optional[bool] = None) -> int:
        if enforce_ownership is None:
            enforce_ownership = self.ownership_enforced
        with self.guard.write():
            if key in self.shards:
                raise KeyExists(key)
            self.shards[key] = Shard(key, 1, initial_content, enforce_ownership)
            if self.wal is not None:
                self.wal.append(key, 1, "", initial_content)
            return 1

    def read_shard(self, key: str, agent: str, now: Optional[int] = None) -> Tuple[str, int]:
        # exclusive so the log append and the returned version cannot be split
        with self.guard.write():
            shard = self.shards.get(key)
            if shard is None:
                raise UnknownKey(key)
            content, version = shard.content, shard.version
            self.log.record(agent, key, version, now)
            self.counters.gets += 1
            if self.history is not None:
                self.history.append(EventKind.GET, agent, key, version)
            return content, version

    def version_of(self, key: str) -> int:
        """Current version, 0 for a key that does not exist. Caller holds the guard."""
        shard = self.shards.get(key)
        return shard.version if shard else 0

    def insert_token(self, key: str, agent: str) -> str:
        """Insert-if-absent; returns the owner. Caller holds the guard for writing."""
        with self.token_lock:
            return self.tokens.setdefault(key, agent)

    def token_owner(self, key: str) -> Optional[str]:
        with self.token_lock:
            return self.tokens.get(key)

    def snapshot(self, *, include_logs: bool = False) -> RegistrySnapshot:
        with self.guard.read():
            with self.token_lock:
                owners = dict(self.tokens)
            return RegistrySnapshot(
                entries={k: (s.version, s.content) for k, s in self.shards.items()},
                token_owners=owners,
                counters=Counters(**asdict(self.counters)),
                delivery_logs=self.log.export() if include_logs else None,
            )

    def expire_sessions(self, now: Optional[int] = None) -> int:
        with self.guard.write():
            return self.log.expire_sessions(now)

    def reset(self) -> None:
        with self.guard.write():
            self.shards.clear()
            with self.token_lock:
                self.tokens.clear()
            self.counters = Counters()
            self.log.clear()
            if self.wal is not None:
                self.wal.truncate()
            if self.history is not None:
                self.history.clear()

    def check_invariants(self) -> list:
        """Return descriptions of any broken state invariant (empty when sound)."""
        problems = []
        with self.guard.read():
            for agent in self.log.agents():
                for entry in self.log.entries(agent):
                    if entry.version > self.version_of(entry.key):
                        problems.append(
                            f"{agent} logged {entry.key}@{entry.version} ahead of registry"
                        )
            c = self.counters
            if not c.view_divergent_commits <= c.view_checked_commits <= c.commits + c.rejects:
                problems.append(f"counter soundness broken: {c}")
            for shard in self.shards.values():
                if shard.version < 1:
                    problems.append(f"{shard.key} has version {shard.version}")
        return problems
