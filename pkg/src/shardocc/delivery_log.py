"""Per-agent logs of observed reads and effective read-set construction.

Every GET an agent issues is appended to that agent's session log. At
commit time the log, merged with any read-set the agent declared
explicitly, becomes the set of cross-shard versions the commit is
validated against.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

from .errors import SessionExpired

INFINITE_TTL = math.inf


def monotonic_ms() -> int:
    return time.monotonic_ns() // 1_000_000


@dataclass(frozen=True)
class DeliveryLogEntry:
    key: str
    version: int
    observed_at: int


@dataclass
class Session:
    agent: str
    created_at: int
    ttl: float = INFINITE_TTL
    entries: List[DeliveryLogEntry] = field(default_factory=list)

    def expired(self, now: int) -> bool:
        return now - self.created_at > self.ttl


class DeliveryLog:
    """Session logs keyed by agent id.

    Not locked on its own: the registry calls into it only while holding its
    guard, which serialises writes per agent.
    """

    def __init__(self, ttl: float = INFINITE_TTL, clock: Callable[[], int] = monotonic_ms):
        self.ttl = ttl
        self.clock = clock
        self._sessions: Dict[str, Session] = {}
        # agents whose session was dropped; they get SessionExpired until they GET again
        self._expired: set = set()

    def record(self, agent: str, key: str, version: int, now: Optional[int] = None) -> None:
        if now is None:
            now = self.clock()
        session = self._sessions.get(agent)
        if session is not None and session.expired(now):
            session = None
        if session is None:
            session = Session(agent=agent, created_at=now, ttl=self.ttl)
            self._sessions[agent] = session
            self._expired.discard(agent)
        session.entries.append(DeliveryLogEntry(key, version, now))

    def effective_read_set(
        self,
        agent: str,
        commit_key: str,
        explicit: Optional[Mapping[str, int]] = None,
        now: Optional[int] = None,
    ) -> Dict[str, int]:
        """Merge the agent's logged reads with its explicit declaration.

        Within the log the most recent version of a key wins; explicit entries
        override the log. ``commit_key`` is left in the result and skipped by
        the validator.
        """
        if now is None:
            now = self.clock()
        if agent in self._expired:
            raise SessionExpired(agent)
        session = self._sessions.get(agent)
        reads: Dict[str, int] = {}
        if session is not None:
            if session.expired(now):
                raise SessionExpired(agent)
            for entry in session.entries:
                reads[entry.key] = entry.version
        if explicit:
            reads.update(explicit)
        return reads

    def expire_sessions(self, now: Optional[int] = None) -> int:
        if now is None:
            now = self.clock()
        dead = [agent for agent, s in self._sessions.items() if s.expired(now)]
        for agent in dead:
            del self._sessions[agent]
            self._expired.add(agent)
        return len(dead)

    def session(self, agent: str) -> Optional[Session]:
        return self._sessions.get(agent)

    def entries(self, agent: str) -> List[DeliveryLogEntry]:
        session = self._sessions.get(agent)
        return list(session.entries) if session else []

    def agents(self) -> List[str]:
        return sorted(self._sessions)

    def export(self) -> Dict[str, List[List]]:
        return {
            agent: [[e.key, e.version, e.observed_at] for e in s.entries]
            for agent, s in sorted(self._sessions.items())
        }

    def clear(self) -> None:
        self._sessions.clear()
        self._expired.clear()
