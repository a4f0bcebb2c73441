"""HTTP/1.1 JSON front end for the registry.

Endpoints::

    GET  /shard/{key}?agent_id=X   200 {key, version, content} | 404 | 422
    POST /commit/v2                200 {new_version} | 409 | 410 | 404 | 422
    POST /admin/shard              201 {key, version} | 409 KeyExists
    POST /admin/reset              204
    GET  /stats[?include_logs=1]   200 registry snapshot
    GET  /history                  200 line-delimited events (when recording)
    GET  /health                   200 {"status": "ok"}

Upgrade requests (h2c, websockets) are served as plain HTTP/1.1; the
server never switches protocols.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, unquote, urlsplit

from .acp import CommitRequest, Status, submit
from .delivery_log import INFINITE_TTL
from .errors import DomainError, KeyExists, UnknownKey
from .history import History, dumps
from .registry import Registry
from .wal import WalWriter

log = logging.getLogger(__name__)

STATUS_FOR_CODE = {
    "CrossShardStale": 409,
    "VersionMismatch": 409,
    "OwnershipViolation": 409,
    "KeyExists": 409,
    "SessionExpired": 410,
    "UnknownKey": 404,
    "BadRequest": 422,
}


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 7000
    ori_enabled: bool = True
    ownership_enforced: bool = False
    session_ttl_ms: int = 0  # 0 means sessions never expire
    wal_path: Optional[str] = None
    wal_fsync: bool = False
    wal_store_content: bool = False
    record_history: bool = False

    @classmethod
    def from_env(cls, environ=os.environ) -> "ServiceConfig":
        def flag(name, default):
            raw = environ.get(name)
            return default if raw is None else raw.strip().lower() in ("1", "true", "yes", "on")

        return cls(
            host=environ.get("SHARDOCC_HOST", cls.host),
            port=int(environ.get("SHARDOCC_PORT", cls.port)),
            ori_enabled=flag("SHARDOCC_ORI_ENABLED", cls.ori_enabled),
            ownership_enforced=flag("SHARDOCC_OWNERSHIP_ENFORCED", cls.ownership_enforced),
            session_ttl_ms=int(environ.get("SHARDOCC_SESSION_TTL_MS", cls.session_ttl_ms)),
            wal_path=environ.get("SHARDOCC_WAL_PATH") or None,
            wal_fsync=flag("SHARDOCC_WAL_FSYNC", cls.wal_fsync),
            record_history=flag("SHARDOCC_RECORD_HISTORY", cls.record_history),
        )


class ApiError(Exception):
    def __init__(self, code: str, detail: Optional[str] = None):
        super().__init__(code)
        self.code = code
        self.detail = detail
        self.http_status = STATUS_FOR_CODE[code]

    def body(self) -> dict:
        data = {"code": self.code}
        if self.detail is not None:
            data["detail"] = self.detail
        return data


class Service:
    """Transport-independent request handling; the HTTP handler is a thin shell over it."""

    def __init__(self, config: ServiceConfig, registry: Optional[Registry] = None):
        self.config = config
        if registry is None:
            ttl = config.session_ttl_ms or INFINITE_TTL
            wal = None
            if config.wal_path:
                wal = WalWriter(config.wal_path, fsync=config.wal_fsync,
                                store_content=config.wal_store_content)
            registry = Registry(
                session_ttl=ttl,
                ownership_enforced=config.ownership_enforced,
                wal=wal,
                history=History() if config.record_history else None,
            )
        self.registry = registry

    def get_shard(self, key: str, agent: Optional[str]) -> dict:
        if not agent:
            raise ApiError("BadRequest", "agent_id query parameter is required")
        try:
            content, version = self.registry.read_shard(key, agent)
        except UnknownKey:
            raise ApiError("UnknownKey", key) from None
        return {"key": key, "version": version, "content": content}

    def commit(self, body) -> dict:
        req = _parse_commit(body)
        try:
            outcome = submit(self.registry, req, ori_enabled=self.config.ori_enabled)
        except UnknownKey:
            raise ApiError("UnknownKey", req.key) from None
        if outcome.status is Status.OK:
            return {"new_version": outcome.new_version}
        raise ApiError(outcome.status.value, outcome.stale_key)

    def create_shard(self, body) -> dict:
        if not isinstance(body, dict) or not isinstance(body.get("key"), str) or not body["key"]:
            raise ApiError("BadRequest", "body must carry a non-empty string 'key'")
        content = body.get("content", "")
        if not isinstance(content, str):
            raise ApiError("BadRequest", "'content' must be a string")
        enforce = body.get("enforce_ownership")
        if enforce is not None and not isinstance(enforce, bool):
            raise ApiError("BadRequest", "'enforce_ownership' must be a boolean")
        try:
            version = self.registry.create_shard(body["key"], content, enforce_ownership=enforce)
        except KeyExists:
            raise ApiError("KeyExists", body["key"]) from None
        return {"key": body["key"], "version": version}

    def reset(self) -> None:
        self.registry.reset()

    def stats(self, include_logs: bool = False) -> dict:
        snap = self.registry.snapshot(include_logs=include_logs)
        data = snap.to_dict()
        data["ori_enabled"] = self.config.ori_enabled
        return data

    def history_text(self) -> str:
        if self.registry.history is None:
            raise ApiError("BadRequest", "history recording is disabled")
        return dumps(self.registry.history.events)


def _parse_commit(body) -> CommitRequest:
    if not isinstance(body, dict):
        raise ApiError("BadRequest", "body must be a JSON object")
    key, expected, delta, agent = (body.get(f) for f in ("key", "expected_version", "delta", "agent_id"))
    if not isinstance(key, str) or not key:
        raise ApiError("BadRequest", "'key' must be a non-empty string")
    if not isinstance(expected, int) or isinstance(expected, bool) or expected < 1:
        raise ApiError("BadRequest", "'expected_version' must be an integer >= 1")
    if not isinstance(delta, str):
        raise ApiError("BadRequest", "'delta' must be a string")
    if not isinstance(agent, str) or not agent:
        raise ApiError("BadRequest", "'agent_id' must be a non-empty string")
    read_set = body.get("read_set")
    explicit = None
    if read_set is not None:
        if not isinstance(read_set, list):
            raise ApiError("BadRequest", "'read_set' must be an array of {key, version}")
        explicit = {}
        for item in read_set:
            if (not isinstance(item, dict) or not isinstance(item.get("key"), str)
                    or not isinstance(item.get("version"), int) or isinstance(item.get("version"), bool)):
                raise ApiError("BadRequest", "read_set entries must be {key: str, version: int}")
            explicit[item["key"]] = item["version"]
    try:
        return CommitRequest(key, expected, delta, agent, explicit)
    except DomainError as exc:
        raise ApiError("BadRequest", str(exc)) from None


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "shardocc/0.1"
    disable_nagle_algorithm = True
    service: Service  # set on the subclass built by make_server

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, payload=None, content_type="application/json"):
        if payload is None:
            body = b""
        elif isinstance(payload, str):
            body = payload.encode("utf-8")
        else:
            body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        if body or status != 204:
            self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if body:
            self.wfile.write(body)

    def _read_json(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        try:
            return json.loads(raw or b"null")
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise ApiError("BadRequest", "body is not valid JSON") from None

    def _dispatch(self, method):
        url = urlsplit(self.path)
        query = parse_qs(url.query)
        path = url.path
        svc = self.service
        try:
            if method == "GET" and path.startswith("/shard/"):
                key = unquote(path[len("/shard/"):])
                agent = query.get("agent_id", [None])[0]
                self._send(200, svc.get_shard(key, agent))
            elif method == "POST" and path == "/commit/v2":
                self._send(200, svc.commit(self._read_json()))
            elif method == "POST" and path == "/admin/shard":
                self._send(201, svc.create_shard(self._read_json()))
            elif method == "POST" and path == "/admin/reset":
                self._read_json()
                svc.reset()
                self._send(204)
            elif method == "GET" and path == "/stats":
                include = query.get("include_logs", ["0"])[0] in ("1", "true")
                self._send(200, svc.stats(include_logs=include))
            elif method == "GET" and path == "/history":
                self._send(200, svc.history_text(), content_type="application/x-ndjson")
            elif method == "GET" and path == "/health":
                self._send(200, {"status": "ok"})
            else:
                self._send(404, {"code": "NotFound", "detail": path})
        except ApiError as exc:
            self._send(exc.http_status, exc.body())

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")


def make_server(config: ServiceConfig, service: Optional[Service] = None) -> ThreadingHTTPServer:
    service = service or Service(config)
    handler = type("Handler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((config.host, config.port), handler)
    server.daemon_threads = True
    server.service = service
    return server


class BackgroundServer:
    """Run a server on a daemon thread; handy for tests and in-process live mode."""

    def __init__(self, config: Optional[ServiceConfig] = None, service: Optional[Service] = None):
        config = config or ServiceConfig(port=0)
        self.server = make_server(config, service)
        self.service = self.server.service
        self._thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.05},
                                        daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
        self._thread.join(timeout=5)


def serve(config: ServiceConfig) -> None:
    server = make_server(config)
    host, port = server.server_address[:2]
    log.info("listening on http://%s:%s (ori_enabled=%s)", host, port, config.ori_enabled)
    print(f"listening on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
