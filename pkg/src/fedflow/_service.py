"""Shared plumbing for the testbed's HTTP services (store and nodes)."""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

log = logging.getLogger(__name__)


class ServiceHandler(BaseHTTPRequestHandler):
    """Request handler base: HTTP/1.1 keep-alive, JSON/bytes helpers."""

    protocol_version = "HTTP/1.1"
    server_version = "fedflow"

    def log_message(self, format: str, *args) -> None:  # noqa: A002 - stdlib signature
        log.debug("%s %s", self.address_string(), format % args)

    def read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def send_bytes(self, status: int, body: bytes,
                   content_type: str = "application/octet-stream",
                   extra_headers: dict[str, str] | None = None) -> None:
        try:
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            for k, v in (extra_headers or {}).items():
                self.send_header(k, v)
            self.end_headers()
            if body:
                self.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            # peer gave up (e.g. client timeout during a long poll); nothing to do
            self.close_connection = True

    def send_json(self, status: int, doc,
                  extra_headers: dict[str, str] | None = None) -> None:
        self.send_bytes(status, json.dumps(doc).encode("utf-8"),
                        content_type="application/json", extra_headers=extra_headers)


class HttpService:
    """A ThreadingHTTPServer running on a daemon thread."""

    def __init__(self, host: str, port: int, handler_cls: type[ServiceHandler]):
        self.server = ThreadingHTTPServer((host, port), handler_cls)
        self.server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.server.server_address[:2]
        return f"{host}:{port}"

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    def start(self) -> "HttpService":
        self._thread = threading.Thread(target=self.server.serve_forever,
                                        name=f"http-{self.address}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
