"""Optimistic concurrency control for shared agent state with server-side read-set tracking."""

from .acp import CommitOutcome, CommitRequest, Status, commit, commit_lww, replay_wal, required_retry_budget, submit
from .delivery_log import DeliveryLog, DeliveryLogEntry
from .errors import (
    BudgetExceeded,
    CorruptWal,
    DomainError,
    HarnessAbort,
    KeyExists,
    MalformedHistory,
    SessionExpired,
    UnknownKey,
)
from .history import History, HistoryEvent, contains_src, is_ori_legal
from .registry import Registry, RegistrySnapshot
from .stats import rule_of_three, wilson_ci

__version__ = "0.1.0"
