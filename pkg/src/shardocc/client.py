"""Clients used by the harness: one drives a registry in-process, the other a live server.

Both expose the same methods so agent scripts do not care which they talk to.
"""

from __future__ import annotations

import http.client
import json
import socket
import threading
from typing import List, Mapping, Optional, Tuple
from urllib.parse import quote, urlsplit

from .acp import CommitOutcome, CommitRequest, Status, submit
from .errors import KeyExists, ShardOccError, UnknownKey
from .history import History, HistoryEvent, loads
from .registry import Registry


class InProcessClient:
    def __init__(self, registry: Optional[Registry] = None, *, ori_enabled: bool = True):
        self.registry = registry if registry is not None else Registry(history=History())
        self.ori_enabled = ori_enabled

    def get(self, agent: str, key: str) -> Tuple[str, int]:
        return self.registry.read_shard(key, agent)

    def commit(self, agent, key, expected_version, delta, read_set: Optional[Mapping[str, int]] = None):
        req = CommitRequest(key, expected_version, delta, agent, dict(read_set) if read_set else None)
        return submit(self.registry, req, ori_enabled=self.ori_enabled)

    def create_shard(self, key: str, content: str = "") -> int:
        return self.registry.create_shard(key, content)

    def reset(self) -> None:
        self.registry.reset()

    def stats(self, include_logs: bool = False) -> dict:
        return self.registry.snapshot(include_logs=include_logs).to_dict()

    def history(self) -> List[HistoryEvent]:
        if self.registry.history is None:
            return []
        return self.registry.history.events

    def clone(self) -> "InProcessClient":
        return self


class HttpError(ShardOccError):
    def __init__(self, status, body):
        super().__init__(f"HTTP {status}: {body}")
        self.status = status
        self.body = body


class _NoDelayConnection(http.client.HTTPConnection):
    # request line and body are sent separately; Nagle would hold the body for a delayed ACK
    def connect(self):
        super().connect()
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


class HttpClient:
    """Speaks the JSON API over one persistent HTTP/1.1 connection.

    A connection is not thread-safe; give each worker thread its own clone.
    """

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        parts = urlsplit(self.base_url)
        self._host = parts.hostname
        self._port = parts.port or 80
        self.timeout = timeout
        self._conn: Optional[http.client.HTTPConnection] = None
        self._lock = threading.Lock()

    def _request(self, method, path, body=None):
        payload = None if body is None else json.dumps(body).encode("utf-8")
        headers = {"Content-Type": "application/json"} if payload is not None else {}
        with self._lock:
            for attempt in (0, 1):
                if self._conn is None:
                    self._conn = _NoDelayConnection(self._host, self._port, timeout=self.timeout)
                try:
                    self._conn.request(method, path, body=payload, headers=headers)
                    resp = self._conn.getresponse()
                    raw = resp.read()
                    break
                except (http.client.RemoteDisconnected, BrokenPipeError, ConnectionResetError):
                    self._conn.close()
                    self._conn = None
                    # a request that never reached the server is safe to resend once
                    if attempt:
                        raise
        ctype = resp.getheader("Content-Type", "")
        if raw and ctype.startswith("application/json"):
            data = json.loads(raw)
        else:
            data = raw.decode("utf-8")
        return resp.status, data

    def close(self):
        with self._lock:
            if self._conn is not None:
                self._conn.close()
                self._conn = None

    def get(self, agent: str, key: str) -> Tuple[str, int]:
        status, data = self._request("GET", f"/shard/{quote(key, safe='')}?agent_id={quote(agent, safe='')}")
        if status == 404:
            raise UnknownKey(key)
        if status != 200:
            raise HttpError(status, data)
        return data["content"], data["version"]

    def commit(self, agent, key, expected_version, delta, read_set: Optional[Mapping[str, int]] = None):
        body = {"key": key, "expected_version": expected_version, "delta": delta, "agent_id": agent}
        if read_set is not None:
            body["read_set"] = [{"key": k, "version": v} for k, v in sorted(read_set.items())]
        status, data = self._request("POST", "/commit/v2", body)
        if status == 200:
            return CommitOutcome(Status.OK, new_version=data["new_version"])
        if status in (409, 410) and isinstance(data, dict) and data.get("code") in Status._value2member_map_:
            code = Status(data["code"])
            return CommitOutcome(code, stale_key=data.get("detail") if code is Status.CROSS_SHARD_STALE else None)
        if status == 404:
            raise UnknownKey(key)
        raise HttpError(status, data)

    def create_shard(self, key: str, content: str = "") -> int:
        status, data = self._request("POST", "/admin/shard", {"key": key, "content": content})
        if status == 409:
            raise KeyExists(key)
        if status != 201:
            raise HttpError(status, data)
        return data["version"]

    def reset(self) -> None:
        status, data = self._request("POST", "/admin/reset")
        if status != 204:
            raise HttpError(status, data)

    def stats(self, include_logs: bool = False) -> dict:
        status, data = self._request("GET", "/stats?include_logs=1" if include_logs else "/stats")
        if status != 200:
            raise HttpError(status, data)
        return data

    def health(self) -> bool:
        try:
            return self._request("GET", "/health")[0] == 200
        except OSError:
            return False

    def history(self) -> List[HistoryEvent]:
        status, data = self._request("GET", "/history")
        if status != 200:
            raise HttpError(status, data)
        return loads(data)

    def clone(self) -> "HttpClient":
        return HttpClient(self.base_url, self.timeout)
