"""Thin HTTP client on http.client with per-thread persistent connections.

Keeps loopback round trips cheap (no per-call socket setup) and avoids
cross-thread sharing of connections entirely.
"""

from __future__ import annotations

import http.client
import json
import threading
import urllib.parse

_local = threading.local()

DEFAULT_TIMEOUT_S = 130.0


class HttpResponse:
    __slots__ = ("status", "headers", "body")

    def __init__(self, status: int, headers: dict[str, str], body: bytes):
        self.status = status
        self.headers = headers
        self.body = body

    def json(self):
        return json.loads(self.body.decode("utf-8"))


def _connections() -> dict:
    if not hasattr(_local, "conns"):
        _local.conns = {}
    return _local.conns


def _get_conn(netloc: str, timeout_s: float) -> http.client.HTTPConnection:
    conns = _connections()
    conn = conns.get(netloc)
    if conn is None:
        conn = http.client.HTTPConnection(netloc, timeout=timeout_s)
        conns[netloc] = conn
    else:
        conn.timeout = timeout_s
    return conn


def _drop_conn(netloc: str) -> None:
    conn = _connections().pop(netloc, None)
    if conn is not None:
        try:
            conn.close()
        except OSError:
            pass


def request(method: str, url: str, body: bytes | None = None,
            headers: dict[str, str] | None = None,
            timeout_s: float = DEFAULT_TIMEOUT_S) -> HttpResponse:
    """Issue one HTTP request, reusing this thread's connection to the host.

    Retries exactly once on a stale kept-alive connection; connection-refused
    and timeout errors propagate to the caller.
    """
    parsed = urllib.parse.urlsplit(url if "://" in url else f"http://{url}")
    netloc = parsed.netloc
    path = parsed.path or "/"
    if parsed.query:
        path += "?" + parsed.query
    hdrs = dict(headers or {})
    data = body if body is not None else b""
    hdrs.setdefault("Content-Length", str(len(data)))
    for attempt in (0, 1):
        conn = _get_conn(netloc, timeout_s)
        try:
            conn.request(method, path, body=data, headers=hdrs)
            resp = conn.getresponse()
            payload = resp.read()
            return HttpResponse(resp.status, dict(resp.getheaders()), payload)
        except (http.client.HTTPException, ConnectionResetError, BrokenPipeError, OSError):
            _drop_conn(netloc)
            if attempt == 1:
                raise
            # fall through: retry once on a fresh connection


def get(url: str, headers: dict[str, str] | None = None,
        timeout_s: float = DEFAULT_TIMEOUT_S) -> HttpResponse:
    return request("GET", url, headers=headers, timeout_s=timeout_s)


def post(url: str, body: bytes = b"", headers: dict[str, str] | None = None,
         timeout_s: float = DEFAULT_TIMEOUT_S) -> HttpResponse:
    return request("POST", url, body=body, headers=headers, timeout_s=timeout_s)


def post_json(url: str, doc, headers: dict[str, str] | None = None,
              timeout_s: float = DEFAULT_TIMEOUT_S) -> HttpResponse:
    hdrs = {"Content-Type": "application/json"}
    hdrs.update(headers or {})
    return request("POST", url, body=json.dumps(doc).encode("utf-8"),
                   headers=hdrs, timeout_s=timeout_s)


def put(url: str, body: bytes = b"", headers: dict[str, str] | None = None,
        timeout_s: float = DEFAULT_TIMEOUT_S) -> HttpResponse:
    return request("PUT", url, body=body, headers=headers, timeout_s=timeout_s)


def delete(url: str, headers: dict[str, str] | None = None,
           timeout_s: float = DEFAULT_TIMEOUT_S) -> HttpResponse:
    return request("DELETE", url, headers=headers, timeout_s=timeout_s)
