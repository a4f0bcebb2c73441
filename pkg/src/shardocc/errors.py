"""Exception types shared across the package."""


class ShardOccError(Exception):
    """Base class for all package errors."""


class UnknownKey(ShardOccError, KeyError):
    def __init__(self, key):
        super().__init__(key)
        self.key = key

    def __str__(self):
        return f"unknown shard key {self.key!r}"


class KeyExists(ShardOccError):
    def __init__(self, key):
        super().__init__(f"shard {key!r} already exists")
        self.key = key


class SessionExpired(ShardOccError):
    def __init__(self, agent):
        super().__init__(f"session for agent {agent!r} expired")
        self.agent = agent


class DomainError(ShardOccError, ValueError):
    pass


class CorruptWal(ShardOccError):
    """Raised when a WAL cannot be replayed.

    ``records`` holds the clean prefix that precedes the damage, so a caller
    recovering from a torn tail can still replay what was durable.
    """

    def __init__(self, message, records=()):
        super().__init__(message)
        self.records = list(records)


class MalformedHistory(ShardOccError, ValueError):
    pass


class BudgetExceeded(ShardOccError):
    def __init__(self, cap, visited):
        super().__init__(f"enumeration exceeded state cap {cap} (visited {visited})")
        self.cap = cap
        self.visited = visited


class HarnessAbort(ShardOccError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
