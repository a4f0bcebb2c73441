"""Global event trace and the checks run over it.

A history is the total order in which the registry serialised GETs and
commit attempts. Two questions are asked of it:

* is it legal: per-key committed versions strictly increase, and no accepted
  commit carried a cross-shard read that another commit had superseded
  between the read and the commit;
* does it contain a structural race: two agents read the same version of a
  key and both attempt a commit expecting that version, the second without
  re-reading.
"""

from __future__ import annotations

import json
import threading
from bisect import bisect_left, bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .errors import MalformedHistory


class EventKind(str, Enum):
    GET = "Get"
    COMMIT_OK = "CommitOk"
    COMMIT_REJECT = "CommitReject"


class ViolationKind(str, Enum):
    WRITE_WRITE_UNSERIALIZED = "WriteWriteUnserialized"
    CROSS_SHARD_STALE_ACCEPTED = "CrossShardStaleAccepted"
    SRC_PRESENT = "SrcPresent"


@dataclass(frozen=True)
class HistoryEvent:
    """One serialised operation.

    ``version`` is the version returned for a Get, the new version for a
    CommitOk and the expected version for a CommitReject. ``expected_version``
    is kept for every commit because last-writer-wins commits may succeed
    with a new version unrelated to what the agent expected.
    """

    seq: int
    kind: EventKind
    agent: str
    key: str
    version: int
    read_set: Tuple[Tuple[str, int], ...] = ()
    expected_version: Optional[int] = None
    code: Optional[str] = None

    @property
    def is_commit(self) -> bool:
        return self.kind is not EventKind.GET

    @property
    def expected(self) -> int:
        if self.expected_version is not None:
            return self.expected_version
        if self.kind is EventKind.COMMIT_OK:
            return self.version - 1
        return self.version

    def to_json(self) -> str:
        data = {
            "seq": self.seq,
            "kind": self.kind.value,
            "agent": self.agent,
            "key": self.key,
            "version": self.version,
        }
        if self.is_commit:
            data["read_set"] = [[k, v] for k, v in self.read_set]
            data["expected_version"] = self.expected
        if self.code:
            data["code"] = self.code
        return json.dumps(data, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "HistoryEvent":
        data = json.loads(line)
        return cls(
            seq=data["seq"],
            kind=EventKind(data["kind"]),
            agent=data["agent"],
            key=data["key"],
            version=data["version"],
            read_set=tuple((k, v) for k, v in data.get("read_set", ())),
            expected_version=data.get("expected_version"),
            code=data.get("code"),
        )


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    evidence: Tuple[int, ...]
    key: str = ""
    detail: str = ""


class History:
    """Thread-safe append-only recorder; the registry appends under its guard."""

    def __init__(self):
        self._events: List[HistoryEvent] = []
        self._lock = threading.Lock()

    def append(self, kind, agent, key, version, read_set=None, expected_version=None, code=None):
        with self._lock:
            event = HistoryEvent(
                seq=len(self._events) + 1,
                kind=kind,
                agent=agent,
                key=key,
                version=version,
                read_set=tuple(sorted(read_set.items())) if read_set else (),
                expected_version=expected_version,
                code=code,
            )
            self._events.append(event)
            return event

    @property
    def events(self) -> List[HistoryEvent]:
        with self._lock:
            return list(self._events)

    def clear(self) -> None:
        with self._lock:
            self._events.clear()

    def __len__(self):
        return len(self._events)


def dumps(events: Iterable[HistoryEvent]) -> str:
    return "".join(e.to_json() + "\n" for e in events)


def loads(text: str) -> List[HistoryEvent]:
    return [HistoryEvent.from_json(line) for line in text.splitlines() if line.strip()]


def _check_order(history: Sequence[HistoryEvent]) -> None:
    for i, event in enumerate(history, start=1):
        if event.seq != i:
            raise MalformedHistory(f"event at position {i} has seq {event.seq}")


class _GetIndex:
    """Per (agent, key) sorted Get positions, with the version each returned."""

    def __init__(self, history: Sequence[HistoryEvent]):
        self.seqs: Dict[Tuple[str, str], List[int]] = defaultdict(list)
        self.versions: Dict[Tuple[str, str], List[int]] = defaultdict(list)
        for e in history:
            if e.kind is EventKind.GET:
                self.seqs[e.agent, e.key].append(e.seq)
                self.versions[e.agent, e.key].append(e.version)

    def last_before(self, agent, key, seq, version=None) -> Optional[int]:
        """Seq of the agent's latest Get of ``key`` before ``seq`` (matching ``version`` if given)."""
        seqs = self.seqs.get((agent, key))
        if not seqs:
            return None
        i = bisect_left(seqs, seq) - 1
        vers = self.versions[agent, key]
        while i >= 0:
            if version is None or vers[i] == version:
                return seqs[i]
            if vers[i] < version:
                return None
            i -= 1
        return None

    def any_between(self, agent, key, lo, hi) -> bool:
        seqs = self.seqs.get((agent, key), ())
        i = bisect_right(seqs, lo)
        return i < len(seqs) and seqs[i] < hi


def _commit_index(history):
    """Per key, the sorted seqs of CommitOk events."""
    index: Dict[str, List[int]] = defaultdict(list)
    for e in history:
        if e.kind is EventKind.COMMIT_OK:
            index[e.key].append(e.seq)
    return index


def stale_accepted(history: Sequence[HistoryEvent], gets: Optional[_GetIndex] = None) -> List[Violation]:
    """Accepted commits whose recorded cross-shard reads were superseded before they ran."""
    gets = gets or _GetIndex(history)
    commits = _commit_index(history)
    found = []
    for e in history:
        if e.kind is not EventKind.COMMIT_OK:
            continue
        for k2, v2 in e.read_set:
            if k2 == e.key:
                continue
            read_seq = gets.last_before(e.agent, k2, e.seq, v2)
            if read_seq is None:
                raise MalformedHistory(
                    f"commit {e.seq} by {e.agent!r} declares ({k2!r}, {v2}) with no matching Get"
                )
            writes = commits.get(k2, ())
            i = bisect_right(writes, read_seq)
            if i < len(writes) and writes[i] < e.seq:
                found.append(Violation(
                    ViolationKind.CROSS_SHARD_STALE_ACCEPTED,
                    (read_seq, writes[i], e.seq),
                    key=e.key,
                    detail=f"read {k2}@{v2} superseded",
                ))
                break
    return found


def _unserialized(history: Sequence[HistoryEvent]) -> List[Violation]:
    last: Dict[str, HistoryEvent] = {}
    found = []
    for e in history:
        if e.kind is not EventKind.COMMIT_OK:
            continue
        prev = last.get(e.key)
        if prev is not None and e.version <= prev.version:
            found.append(Violation(
                ViolationKind.WRITE_WRITE_UNSERIALIZED, (prev.seq, e.seq), key=e.key,
                detail=f"version {e.version} after {prev.version}",
            ))
        last[e.key] = e
    return found


def _src_witnesses(history, key, gets) -> List[Tuple[HistoryEvent, HistoryEvent]]:
    """(first CommitOk, second attempt) pairs forming a structural race on ``key``."""
    # expected version -> CommitOk events on key whose committer had read that version
    firsts: Dict[int, List[HistoryEvent]] = defaultdict(list)
    pairs = []
    for e in history:
        if not e.is_commit or e.key != key:
            continue
        v = e.expected
        second_read = gets.last_before(e.agent, key, e.seq, v)
        if second_read is not None:
            last_read = gets.last_before(e.agent, key, e.seq)
            for first in firsts.get(v, ()):
                if first.agent == e.agent:
                    continue
                # the second committer must not have re-read after the first commit
                if last_read is not None and last_read > first.seq:
                    continue
                pairs.append((first, e))
                break
        if e.kind is EventKind.COMMIT_OK and gets.last_before(e.agent, key, e.seq, v) is not None:
            firsts[v].append(e)
    return pairs


def contains_src(history: Sequence[HistoryEvent], key: str) -> Tuple[bool, Optional[Tuple[int, ...]]]:
    """Return ``(present, witness)``; the witness is (first commit, second agent's Get, second attempt)."""
    _check_order(history)
    gets = _GetIndex(history)
    pairs = _src_witnesses(history, key, gets)
    if not pairs:
        return False, None
    first, second = pairs[0]
    read = gets.last_before(second.agent, key, second.seq, second.expected)
    return True, (first.seq, read, second.seq)


def is_ori_legal(history: Sequence[HistoryEvent]) -> Tuple[bool, List[Violation]]:
    """Check write-write serialisation and cross-shard freshness.

    A structural race is reported as a violation only when its second attempt
    was accepted; a rejected second attempt is exactly the protection working.
    """
    _check_order(history)
    gets = _GetIndex(history)
    violations = _unserialized(history)
    violations += stale_accepted(history, gets)
    for key in sorted({e.key for e in history if e.is_commit}):
        for first, second in _src_witnesses(history, key, gets):
            if second.kind is EventKind.COMMIT_OK:
                read = gets.last_before(second.agent, key, second.seq, second.expected)
                violations.append(Violation(
                    ViolationKind.SRC_PRESENT, (first.seq, read, second.seq), key=key,
                ))
    violations.sort(key=lambda v: (v.evidence[-1], v.kind.value))
    return not violations, violations


def count_type1(history: Sequence[HistoryEvent]) -> int:
    """Number of accepted commits carrying a superseded cross-shard read."""
    _check_order(history)
    return len(stale_accepted(history))
