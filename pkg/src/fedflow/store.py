"""S3-like keyed byte store, one logical store per region in a single process.

Transfer timing is injected by the store itself: a PUT from caller region c to
store region r becomes visible (and is acknowledged) after
``transfer_delay(c, r, size)``; a GET responds after ``transfer_delay(r, c,
size)``. Requests without an ``X-Caller-Region`` header are administrative
(fixture preloading) and incur no delay.

GET supports blocking waits (``X-Wait-Ms``): the store parks the request on a
condition variable and answers as soon as the key becomes visible, which keeps
hand-off timing deterministic instead of quantized to a poll interval.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from . import _http
from ._service import HttpService, ServiceHandler
from .netsim import RegionProfile, UnknownRegion, now_ms

log = logging.getLogger(__name__)

DEFAULT_MAX_OBJECT_BYTES = 64 * 1024 * 1024
DEFAULT_POLL_INTERVAL_MS = 50
DEFAULT_POLL_TIMEOUT_MS = 60_000

OBJECTS_PREFIX = "/objects/"


class NotFound(KeyError):
    """No object under this key in the region."""


class TooLarge(ValueError):
    """Object exceeds the configured maximum size."""


class BadKey(ValueError):
    """Key violates the key rules (empty, whitespace, traversal, too long)."""


class PollTimeout(TimeoutError):
    """poll() gave up before the object appeared."""


def validate_key(key: str) -> None:
    if not key:
        raise BadKey("key must be non-empty")
    if any(c.isspace() for c in key):
        raise BadKey("key must not contain whitespace")
    if len(key.encode("utf-8")) > 512:
        raise BadKey("key exceeds 512 bytes")
    segments = key.split("/")
    if any(seg in ("", ".", "..") for seg in segments):
        raise BadKey("key must not contain empty or dot path segments")


@dataclass
class StoredObject:
    key: str
    data: bytes
    created_at: float  # epoch ms


class ObjectStore:
    """In-memory multi-region object store with injected transfer timing.

    Thread-safe; per-key operations are atomic. Optional directory-backed
    persistence preloads ``persist_dir/{region}/{key}`` at construction and
    writes through on put.
    """

    def __init__(self, profile: RegionProfile,
                 max_object_bytes: int = DEFAULT_MAX_OBJECT_BYTES,
                 persist_dir: str | Path | None = None):
        self.profile = profile
        self.max_object_bytes = max_object_bytes
        self.persist_dir = Path(persist_dir) if persist_dir else None
        self._objects: dict[str, dict[str, StoredObject]] = {r: {} for r in profile.regions}
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)
        if self.persist_dir is not None:
            self._load_persisted()

    def _load_persisted(self) -> None:
        assert self.persist_dir is not None
        for region in self.profile.regions:
            root = self.persist_dir / region
            if not root.is_dir():
                continue
            for path in sorted(p for p in root.rglob("*") if p.is_file()):
                key = path.relative_to(root).as_posix()
                self._objects[region][key] = StoredObject(
                    key=key, data=path.read_bytes(), created_at=now_ms())

    def _region_objects(self, region: str) -> dict[str, StoredObject]:
        try:
            return self._objects[region]
        except KeyError:
            raise UnknownRegion(region) from None

    # -- operations --------------------------------------------------------

    def put(self, region: str, key: str, data: bytes,
            caller_region: str | None = None) -> None:
        """Store bytes under key; visible to any subsequent get; last writer wins."""
        validate_key(key)
        self._region_objects(region)  # raise early on unknown region
        if len(data) > self.max_object_bytes:
            raise TooLarge(f"{len(data)} bytes exceeds limit {self.max_object_bytes}")
        if caller_region is not None:
            # upload time: object becomes visible only once the transfer lands
            self.profile.sleep_raw(self.profile.transfer_delay(caller_region, region, len(data)))
        with self._changed:
            self._region_objects(region)[key] = StoredObject(
                key=key, data=data, created_at=now_ms())
            self._changed.notify_all()
        if self.persist_dir is not None:
            path = self.persist_dir / region / key
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)

    def get(self, region: str, key: str, caller_region: str | None = None,
            wait_ms: float = 0.0) -> bytes:
        """Fetch bytes after the injected transfer delay.

        With wait_ms > 0 the call blocks until the key is visible (or the wall
        deadline passes), then still pays the transfer delay.
        """
        validate_key(key)
        deadline = time.perf_counter() + wait_ms / 1000.0
        with self._changed:
            obj = self._region_objects(region).get(key)
            while obj is None:
                remaining = deadline - time.perf_counter()
                if remaining <= 0:
                    raise NotFound(f"{region}:{key}")
                self._changed.wait(timeout=remaining)
                obj = self._region_objects(region).get(key)
            data = obj.data
        if caller_region is not None:
            self.profile.sleep_raw(self.profile.transfer_delay(region, caller_region, len(data)))
        return data

    def poll(self, region: str, key: str, caller_region: str | None,
             interval_ms: float = DEFAULT_POLL_INTERVAL_MS,
             timeout_ms: float = DEFAULT_POLL_TIMEOUT_MS) -> bytes:
        """Repeatedly attempt get until success, or PollTimeout after timeout_ms."""
        if interval_ms <= 0:
            raise ValueError("interval_ms must be > 0")
        if timeout_ms < interval_ms:
            raise ValueError("timeout_ms must be >= interval_ms")
        try:
            return self.get(region, key, caller_region=caller_region, wait_ms=timeout_ms)
        except NotFound:
            raise PollTimeout(f"{region}:{key} after {timeout_ms} ms") from None

    def contains(self, region: str, key: str) -> bool:
        with self._lock:
            return key in self._region_objects(region)

    def size(self, region: str, key: str) -> int:
        with self._lock:
            obj = self._region_objects(region).get(key)
        if obj is None:
            raise NotFound(f"{region}:{key}")
        return len(obj.data)


# ---------------------------------------------------------------------------
# HTTP service


def _make_handler(engine: ObjectStore) -> type[ServiceHandler]:
    class StoreRequestHandler(ServiceHandler):
        def _parse_object_path(self) -> tuple[str, str] | None:
            # /r/{region}/objects/{key...}
            path = self.path.split("?", 1)[0]
            if not path.startswith("/r/"):
                return None
            rest = path[len("/r/"):]
            idx = rest.find(OBJECTS_PREFIX)
            if idx <= 0:
                return None
            region = rest[:idx]
            key = rest[idx + len(OBJECTS_PREFIX):]
            return region, key

        def _caller_region(self) -> str | None:
            return self.headers.get("X-Caller-Region") or None

        def do_PUT(self) -> None:  # noqa: N802 - stdlib naming
            parsed = self._parse_object_path()
            if parsed is None:
                self.send_json(404, {"error": "no_such_route"})
                return
            region, key = parsed
            data = self.read_body()
            try:
                engine.put(region, key, data, caller_region=self._caller_region())
            except UnknownRegion:
                self.send_json(404, {"error": "unknown_region", "region": region})
            except TooLarge:
                self.send_json(413, {"error": "too_large", "limit": engine.max_object_bytes})
            except BadKey as exc:
                self.send_json(400, {"error": "bad_key", "detail": str(exc)})
            else:
                self.send_bytes(204, b"")

        def do_GET(self) -> None:  # noqa: N802
            path = self.path.split("?", 1)[0]
            if path == "/healthz":
                self.send_json(200, {"status": "ok"})
                return
            parsed = self._parse_object_path()
            if parsed is None:
                self.send_json(404, {"error": "no_such_route"})
                return
            region, key = parsed
            wait_ms = float(self.headers.get("X-Wait-Ms") or 0)
            try:
                data = engine.get(region, key, caller_region=self._caller_region(),
                                  wait_ms=wait_ms)
            except UnknownRegion:
                self.send_json(404, {"error": "unknown_region", "region": region})
            except NotFound:
                self.send_json(404, {"error": "not_found", "key": key})
            except BadKey as exc:
                self.send_json(400, {"error": "bad_key", "detail": str(exc)})
            else:
                self.send_bytes(200, data)

    return StoreRequestHandler


class StoreServer(HttpService):
    """HTTP front end for an ObjectStore engine."""

    def __init__(self, engine: ObjectStore, host: str = "127.0.0.1", port: int = 0):
        super().__init__(host, port, _make_handler(engine))
        self.engine = engine

    @property
    def url(self) -> str:
        return f"http://{self.address}"


# ---------------------------------------------------------------------------
# clients


class StoreClient:
    """HTTP client for a store service, bound to one caller region.

    ``caller_region=None`` marks administrative traffic (no injected delay),
    used for fixture preloading and test assertions.
    """

    def __init__(self, base_url: str, caller_region: str | None):
        self.base_url = base_url.rstrip("/")
        self.caller_region = caller_region

    def _headers(self, extra: dict[str, str] | None = None) -> dict[str, str]:
        headers: dict[str, str] = {}
        if self.caller_region is not None:
            headers["X-Caller-Region"] = self.caller_region
        headers.update(extra or {})
        return headers

    def _object_url(self, region: str, key: str) -> str:
        return f"{self.base_url}/r/{region}/objects/{key}"

    def put(self, region: str, key: str, data: bytes) -> None:
        resp = _http.put(self._object_url(region, key), body=data, headers=self._headers())
        if resp.status == 204:
            return
        self._raise_for(resp, region, key)

    def get(self, region: str, key: str, wait_ms: float = 0.0) -> bytes:
        headers = self._headers({"X-Wait-Ms": str(int(wait_ms))} if wait_ms > 0 else None)
        timeout_s = _http.DEFAULT_TIMEOUT_S + wait_ms / 1000.0
        resp = _http.get(self._object_url(region, key), headers=headers, timeout_s=timeout_s)
        if resp.status == 200:
            return resp.body
        self._raise_for(resp, region, key)
        raise AssertionError("unreachable")

    def poll(self, region: str, key: str,
             interval_ms: float = DEFAULT_POLL_INTERVAL_MS,
             timeout_ms: float = DEFAULT_POLL_TIMEOUT_MS) -> bytes:
        """Blocking-get loop; raises PollTimeout once timeout_ms has elapsed."""
        if interval_ms <= 0:
            raise ValueError("interval_ms must be > 0")
        if timeout_ms < interval_ms:
            raise ValueError("timeout_ms must be >= interval_ms")
        deadline = time.perf_counter() + timeout_ms / 1000.0
        while True:
            remaining_ms = (deadline - time.perf_counter()) * 1000.0
            if remaining_ms <= 0:
                raise PollTimeout(f"{region}:{key} after {timeout_ms} ms")
            # bound each server-side wait so one poll never parks a server
            # thread for the full timeout
            slice_ms = min(remaining_ms, 10_000.0)
            try:
                return self.get(region, key, wait_ms=slice_ms)
            except NotFound:
                continue

    @staticmethod
    def _raise_for(resp: _http.HttpResponse, region: str, key: str) -> None:
        try:
            error = resp.json().get("error", "")
        except ValueError:
            error = ""
        if resp.status == 413:
            raise TooLarge(f"{region}:{key}")
        if resp.status == 404 and error == "unknown_region":
            raise UnknownRegion(region)
        if resp.status == 404:
            raise NotFound(f"{region}:{key}")
        if resp.status == 400:
            raise BadKey(f"{region}:{key}")
        raise RuntimeError(f"store returned {resp.status} for {region}:{key}")


class LocalStoreClient:
    """Same interface as StoreClient, calling an in-process engine directly."""

    def __init__(self, engine: ObjectStore, caller_region: str | None):
        self.engine = engine
        self.caller_region = caller_region

    def put(self, region: str, key: str, data: bytes) -> None:
        self.engine.put(region, key, data, caller_region=self.caller_region)

    def get(self, region: str, key: str, wait_ms: float = 0.0) -> bytes:
        return self.engine.get(region, key, caller_region=self.caller_region, wait_ms=wait_ms)

    def poll(self, region: str, key: str,
             interval_ms: float = DEFAULT_POLL_INTERVAL_MS,
             timeout_ms: float = DEFAULT_POLL_TIMEOUT_MS) -> bytes:
        return self.engine.poll(region, key, caller_region=self.caller_region,
                                interval_ms=interval_ms, timeout_ms=timeout_ms)
