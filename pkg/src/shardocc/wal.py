"""Append-only commit log.

Each record is framed as a little-endian u32 payload length followed by the
payload::

    u64 sequence
    u32 key length, key bytes (utf-8)
    u64 new version
    u32 agent length, agent bytes (utf-8)
    32  sha256 digest of the committed content
    [u32 content length, content bytes]   only when full content is stored

Records are written with a single ``os.write`` on an unbuffered descriptor,
so a record is in the kernel before the commit is acknowledged and survives
SIGKILL of the writer. ``fsync=True`` additionally forces it to stable
storage.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

from .errors import CorruptWal

_LEN = struct.Struct("<I")
_U64 = struct.Struct("<Q")
DIGEST_SIZE = 32


def content_digest(content: str) -> bytes:
    return hashlib.sha256(content.encode("utf-8")).digest()


@dataclass(frozen=True)
class WalRecord:
    sequence: int
    key: str
    new_version: int
    agent: str
    content_digest: bytes
    content: Optional[str] = None

    def encode(self) -> bytes:
        key = self.key.encode("utf-8")
        agent = self.agent.encode("utf-8")
        parts = [
            _U64.pack(self.sequence),
            _LEN.pack(len(key)),
            key,
            _U64.pack(self.new_version),
            _LEN.pack(len(agent)),
            agent,
            self.content_digest,
        ]
        if self.content is not None:
            body = self.content.encode("utf-8")
            parts += [_LEN.pack(len(body)), body]
        payload = b"".join(parts)
        return _LEN.pack(len(payload)) + payload


def _decode_payload(payload: bytes) -> WalRecord:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(payload):
            raise CorruptWal("record payload shorter than its fields")
        chunk = payload[pos:pos + n]
        pos += n
        return chunk

    seq = _U64.unpack(take(8))[0]
    key = take(_LEN.unpack(take(4))[0]).decode("utf-8")
    version = _U64.unpack(take(8))[0]
    agent = take(_LEN.unpack(take(4))[0]).decode("utf-8")
    digest = take(DIGEST_SIZE)
    content = None
    if pos < len(payload):
        content = take(_LEN.unpack(take(4))[0]).decode("utf-8")
    if pos != len(payload):
        raise CorruptWal(f"trailing bytes in record {seq}")
    return WalRecord(seq, key, version, agent, digest, content)


def decode_records(data: bytes) -> List[WalRecord]:
    """Decode a WAL byte stream; raise CorruptWal (carrying the clean prefix) on damage."""
    records: List[WalRecord] = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise CorruptWal(f"torn length prefix at byte {pos}", records)
        (length,) = _LEN.unpack_from(data, pos)
        if pos + 4 + length > len(data):
            raise CorruptWal(f"torn record at byte {pos}", records)
        try:
            records.append(_decode_payload(data[pos + 4:pos + 4 + length]))
        except (CorruptWal, UnicodeDecodeError, struct.error) as exc:
            raise CorruptWal(f"bad record at byte {pos}: {exc}", records) from None
        pos += 4 + length
    return records


def read_wal(path, *, allow_torn_tail: bool = False) -> List[WalRecord]:
    data = Path(path).read_bytes()
    try:
        return decode_records(data)
    except CorruptWal as exc:
        if allow_torn_tail:
            return exc.records
        raise


class WalWriter:
    def __init__(self, path, *, fsync: bool = False, store_content: bool = False):
        self.path = Path(path)
        self.fsync = fsync
        self.store_content = store_content
        self._lock = threading.Lock()
        self._fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
        existing = read_wal(self.path, allow_torn_tail=True) if self.path.stat().st_size else []
        self.sequence = existing[-1].sequence if existing else 0

    def append(self, key: str, new_version: int, agent: str, content: str) -> WalRecord:
        with self._lock:
            record = WalRecord(
                sequence=self.sequence + 1,
                key=key,
                new_version=new_version,
                agent=agent,
                content_digest=content_digest(content),
                content=content if self.store_content else None,
            )
            data = record.encode()
            written = os.write(self._fd, data)
            if written != len(data):
                raise OSError(f"short WAL write ({written} of {len(data)} bytes)")
            if self.fsync:
                os.fsync(self._fd)
            self.sequence = record.sequence
            return record

    def truncate(self) -> None:
        with self._lock:
            os.ftruncate(self._fd, 0)
            if self.fsync:
                os.fsync(self._fd)
            self.sequence = 0

    def close(self) -> None:
        with self._lock:
            if self._fd >= 0:
                os.close(self._fd)
                self._fd = -1


def replay_records(records: Iterable[WalRecord]) -> Tuple[dict, dict]:
    """Fold records into ``({key: (version, digest)}, {key: content})``.

    Content is only known for keys whose last record stored it.
    """
    state: dict = {}
    contents: dict = {}
    expected_seq = 1
    for rec in records:
        if rec.sequence != expected_seq:
            raise CorruptWal(f"sequence gap: expected {expected_seq}, found {rec.sequence}")
        expected_seq += 1
        prev = state.get(rec.key, (0, None))[0]
        if rec.new_version != prev + 1:
            raise CorruptWal(
                f"record {rec.sequence}: {rec.key!r} jumps from version {prev} to {rec.new_version}"
            )
        if rec.content is not None:
            if content_digest(rec.content) != rec.content_digest:
                raise CorruptWal(f"record {rec.sequence}: digest mismatch for {rec.key!r}")
            contents[rec.key] = rec.content
        else:
            contents.pop(rec.key, None)
        state[rec.key] = (rec.new_version, rec.content_digest)
    return state, contents
