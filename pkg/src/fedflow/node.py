"""Mini FaaS platform: instance lifecycle with cold starts, invoke endpoint,
and (on native-capable nodes) platform-level interception of pre-fetch pokes.

A node never runs real sandboxes; an instance is a concurrency token whose
creation costs a configured cold-start delay. Native nodes answer a POKE by
staging the step's pre-fetch data themselves, without touching function code;
opaque nodes start the middleware wrapper early instead.
"""

from __future__ import annotations

import collections
import json
import logging
import shutil
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import _http, middleware
from ._service import HttpService, ServiceHandler
from .middleware import (
    PHASE_EXECUTE,
    PHASE_POKE,
    EnvelopeError,
    InvocationEnvelope,
    Messenger,
    StepMeasurement,
    WrapperConfig,
    poke_successor,
    should_poke,
)
from .netsim import RegionProfile, now_ms, sleep_for
from .specs import (
    KIND_NATIVE,
    KIND_OPAQUE,
    KINDS,
    MODE_SYNC,
    FunctionBehavior,
    StepSpec,
    parse_function_behavior,
)
from .store import NotFound

log = logging.getLogger(__name__)

DEFAULT_COLD_START_MS = {KIND_NATIVE: 150, KIND_OPAQUE: 800}
DEFAULT_WARM_TTL_MS = 600_000
DEFAULT_MAX_INSTANCES = 16
DEFAULT_QUEUE_BOUND = 1024
DEDUP_EXPIRY_MS = 600_000  # scaled at runtime

STATE_POKED = "POKED"
STATE_EXECUTING = "EXECUTING"
STATE_DONE = "DONE"


class InvalidPackage(ValueError):
    """Deploy payload is malformed or references unknown regions."""


class UnknownFunction(KeyError):
    """Invocation names a function this node does not host."""


class SyncUnsupported(RuntimeError):
    """SYNC invocation aimed at an opaque node."""


class CapacityExceeded(RuntimeError):
    """Instance pool and its admission queue are both full."""


@dataclass(frozen=True)
class NodeConfig:
    kind: str
    region: str
    cold_start_ms: int
    warm_ttl_ms: int = DEFAULT_WARM_TTL_MS
    max_instances_per_function: int = DEFAULT_MAX_INSTANCES
    queue_bound: int = DEFAULT_QUEUE_BOUND

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.cold_start_ms < 0 or self.warm_ttl_ms < 0:
            raise ValueError("cold_start_ms and warm_ttl_ms must be >= 0")
        if self.max_instances_per_function < 1:
            raise ValueError("max_instances_per_function must be >= 1")

    @classmethod
    def for_kind(cls, kind: str, region: str, cold_start_ms: int | None = None,
                 **overrides) -> "NodeConfig":
        if cold_start_ms is None:
            cold_start_ms = DEFAULT_COLD_START_MS[kind]
        return cls(kind=kind, region=region, cold_start_ms=cold_start_ms, **overrides)


# ---------------------------------------------------------------------------
# instance pool


class _Instance:
    __slots__ = ("instance_id", "created_at", "warm_at", "busy", "claimed", "last_used")

    def __init__(self, instance_id: int, created_at: float, warm_at: float):
        self.instance_id = instance_id
        self.created_at = created_at
        self.warm_at = warm_at
        self.busy = False
        self.claimed = False
        self.last_used = warm_at


class _Waiter:
    __slots__ = ("event", "instance")

    def __init__(self) -> None:
        self.event = threading.Event()
        self.instance: _Instance | None = None


class _FnPool:
    __slots__ = ("instances", "waiters", "next_id")

    def __init__(self) -> None:
        self.instances: list[_Instance] = []
        self.waiters: collections.deque[_Waiter] = collections.deque()
        self.next_id = 0


class InstancePool:
    """Per-function instance tokens with cold-start delay and FIFO admission.

    An instance becomes warm exactly cold_start_ms (scaled) after creation.
    When the pool is full, acquirers queue in FIFO order up to queue_bound.
    """

    def __init__(self, config: NodeConfig, profile: RegionProfile):
        self.config = config
        self.profile = profile
        self._lock = threading.Lock()
        self._pools: dict[str, _FnPool] = {}
        self.cold_starts = 0

    def _pool(self, function: str) -> _FnPool:
        return self._pools.setdefault(function, _FnPool())

    def _create(self, pool: _FnPool) -> _Instance:
        now = now_ms()
        inst = _Instance(pool.next_id, now, now + self.profile.scale(self.config.cold_start_ms))
        pool.next_id += 1
        pool.instances.append(inst)
        self.cold_starts += 1
        return inst

    def acquire(self, function: str) -> _Instance:
        """Block until an instance is exclusively ours; cold-start if needed."""
        waiter: _Waiter | None = None
        claimed: _Instance | None = None
        with self._lock:
            pool = self._pool(function)
            now = now_ms()
            for inst in pool.instances:
                if not inst.busy and not inst.claimed and inst.warm_at <= now:
                    inst.busy = True
                    return inst
            idle_cold = [i for i in pool.instances if not i.busy and not i.claimed]
            if idle_cold:
                claimed = min(idle_cold, key=lambda i: i.warm_at)
                claimed.claimed = True
            elif len(pool.instances) < self.config.max_instances_per_function:
                claimed = self._create(pool)
                claimed.claimed = True
            else:
                if len(pool.waiters) >= self.config.queue_bound:
                    raise CapacityExceeded(function)
                waiter = _Waiter()
                pool.waiters.append(waiter)
        if claimed is not None:
            sleep_for(claimed.warm_at - now_ms())
            with self._lock:
                claimed.claimed = False
                claimed.busy = True
            return claimed
        assert waiter is not None
        waiter.event.wait()
        assert waiter.instance is not None
        return waiter.instance

    def release(self, instance: _Instance, function: str) -> None:
        with self._lock:
            pool = self._pool(function)
            instance.last_used = now_ms()
            if pool.waiters:
                # hand off directly so queued acquirers finish in FIFO order
                waiter = pool.waiters.popleft()
                waiter.instance = instance
                waiter.event.set()
                return
            instance.busy = False

    def ensure_warm(self, function: str) -> float:
        """Pre-warm: make sure some instance exists, wait out its cold start.

        Returns the wall time at which a warm instance was available.
        """
        with self._lock:
            pool = self._pool(function)
            if not pool.instances:
                self._create(pool)
            target = min(i.warm_at for i in pool.instances)
        sleep_for(target - now_ms())
        return now_ms()

    def at_capacity(self, function: str) -> bool:
        with self._lock:
            pool = self._pool(function)
            if len(pool.instances) < self.config.max_instances_per_function:
                return False
            if any(not i.busy and not i.claimed for i in pool.instances):
                return False
            return len(pool.waiters) >= self.config.queue_bound

    def reclaim_idle(self) -> int:
        """Drop warm instances idle longer than warm_ttl; never touches busy ones."""
        ttl = self.profile.scale(self.config.warm_ttl_ms)
        now = now_ms()
        removed = 0
        with self._lock:
            for pool in self._pools.values():
                keep = []
                for inst in pool.instances:
                    idle_expired = (not inst.busy and not inst.claimed
                                    and inst.warm_at <= now
                                    and inst.last_used + ttl <= now)
                    if idle_expired:
                        removed += 1
                    else:
                        keep.append(inst)
                pool.instances[:] = keep
        return removed

    def instance_count(self, function: str) -> int:
        with self._lock:
            return len(self._pool(function).instances)


# ---------------------------------------------------------------------------
# native pre-fetch slots


class PrefetchSlot:
    """Staged pre-fetch state for one (execution_id, step_index) on a native node."""

    def __init__(self, execution_id: str, step_index: int, poke_arrival: float):
        self.execution_id = execution_id
        self.step_index = step_index
        self.poke_arrival = poke_arrival
        self.created_at = poke_arrival
        self.warm_done: float | None = None
        self.poke_forwarded_at: float | None = None
        self.ready_at: float | None = None
        self.error: str | None = None
        self.consumed = False
        self.staged_paths: list[tuple[str, str, Path]] = []
        self._ready = threading.Event()

    def mark_ready(self) -> None:
        self.ready_at = now_ms()
        self._ready.set()

    def wait_until_ready(self, timeout_s: float | None = None) -> float:
        """Block until staging finished; returns how long we actually waited (ms)."""
        start = now_ms()
        self._ready.wait(timeout=timeout_s)
        return now_ms() - start

    def staged_refs(self) -> list[tuple[str, str]]:
        return [(region, key) for region, key, _ in self.staged_paths]


# ---------------------------------------------------------------------------
# the node engine


@dataclass
class _DedupEntry:
    state: str
    created_at: float
    successor_poked: bool = False


@dataclass
class _Deployed:
    behavior: FunctionBehavior
    wrapper_config: WrapperConfig
    deployed_at: float


class FaasNode:
    """Engine behind one FaaS node process; also usable in-process in tests."""

    def __init__(self, config: NodeConfig, profile: RegionProfile, store,
                 measurements_path: str | Path | None = None, name: str | None = None):
        self.config = config
        self.profile = profile
        self.store = store
        self.name = name or f"{config.kind}-{config.region}"
        self.pool = InstancePool(config, profile)
        self.messenger = Messenger(profile, config.region)
        self.poke_fault_hook = None  # test hook: return True to drop a poke

        self._registry: dict[str, _Deployed] = {}
        self._registry_lock = threading.Lock()
        self._dedup: dict[tuple[str, int], _DedupEntry] = {}
        self._slots: dict[tuple[str, int], PrefetchSlot] = {}
        self._state_lock = threading.Lock()
        self._handler_runs: collections.Counter = collections.Counter()
        self._kind_cache: dict[str, str] = {}
        self._measurements: collections.deque[dict] = collections.deque(maxlen=200_000)
        self._measurements_lock = threading.Lock()
        self._measurements_path = Path(measurements_path) if measurements_path else None
        self._staging_dir = Path(tempfile.mkdtemp(prefix="fedflow-node-"))
        self._closed = threading.Event()
        self._janitor = threading.Thread(target=self._janitor_loop,
                                         name=f"janitor-{self.name}", daemon=True)
        self._janitor.start()

    # -- deployment --------------------------------------------------------

    def deploy(self, function_name: str, behavior: FunctionBehavior,
               wrapper_config: WrapperConfig | None = None) -> None:
        """Make the function invokable; redeploy swaps behavior atomically."""
        if not function_name:
            raise InvalidPackage("function_name must be non-empty")
        if behavior.data_dependency is not None:
            ref, _ = behavior.data_dependency
            if not self.profile.has_region(ref.store_region):
                raise InvalidPackage(
                    f"data_dependency region {ref.store_region!r} is not in the region profile")
        with self._registry_lock:
            self._registry[function_name] = _Deployed(
                behavior=behavior,
                wrapper_config=wrapper_config or WrapperConfig(),
                deployed_at=now_ms())
        log.info("node %s: deployed %s", self.name, function_name)

    def deploy_from_json(self, doc: dict) -> None:
        if not isinstance(doc, dict) or "function_name" not in doc:
            raise InvalidPackage("package must carry function_name")
        try:
            behavior = parse_function_behavior(doc.get("behavior", {}))
        except ValueError as exc:
            raise InvalidPackage(str(exc)) from None
        wcfg = WrapperConfig.from_json_dict(doc.get("wrapper_config"))
        self.deploy(str(doc["function_name"]), behavior, wcfg)

    def undeploy(self, function_name: str) -> bool:
        with self._registry_lock:
            return self._registry.pop(function_name, None) is not None

    def functions(self) -> dict[str, dict]:
        with self._registry_lock:
            return {
                name: {"behavior": d.behavior.to_json_dict(),
                       "wrapper_config": d.wrapper_config.to_json_dict()}
                for name, d in sorted(self._registry.items())
            }

    def _lookup(self, function_name: str) -> _Deployed:
        with self._registry_lock:
            entry = self._registry.get(function_name)
        if entry is None:
            raise UnknownFunction(function_name)
        return entry

    def wrapper_config(self, function_name: str) -> WrapperConfig:
        return self._lookup(function_name).wrapper_config

    # -- helpers used by the middleware -------------------------------------

    def kind_of(self, step: StepSpec) -> str:
        """Platform kind of another node, discovered once via its health endpoint."""
        cached = self._kind_cache.get(step.target)
        if cached is not None:
            return cached
        try:
            resp = _http.get(f"http://{step.target}/healthz", timeout_s=5.0)
            kind = resp.json().get("kind", KIND_OPAQUE)
        except (OSError, ValueError):
            return KIND_OPAQUE  # unreachable or foreign: assume buffered passing
        self._kind_cache[step.target] = kind
        return kind

    def mark_successor_poked(self, execution_id: str, step_index: int) -> bool:
        """True exactly once per (execution, step): the caller should send the poke."""
        with self._state_lock:
            entry = self._dedup.get((execution_id, step_index))
            if entry is None:
                entry = _DedupEntry(state=STATE_EXECUTING, created_at=now_ms())
                entry.state = "PENDING"  # placeholder until a real claim lands
                self._dedup[(execution_id, step_index)] = entry
            if entry.successor_poked:
                return False
            entry.successor_poked = True
            return True

    def count_handler_run(self, execution_id: str, step_index: int) -> None:
        with self._state_lock:
            self._handler_runs[(execution_id, step_index)] += 1

    def handler_runs(self, execution_id: str, step_index: int) -> int:
        with self._state_lock:
            return self._handler_runs[(execution_id, step_index)]

    def emit_measurement(self, m: StepMeasurement) -> None:
        doc = m.to_json_dict()
        line = json.dumps(doc, sort_keys=True)
        with self._measurements_lock:
            self._measurements.append(doc)
            if self._measurements_path is not None:
                with open(self._measurements_path, "a", encoding="utf-8") as f:
                    f.write(line + "\n")

    def measurements(self, clear: bool = False) -> list[dict]:
        with self._measurements_lock:
            out = list(self._measurements)
            if clear:
                self._measurements.clear()
        return out

    # -- dedup claims --------------------------------------------------------

    def _claim(self, execution_id: str, step_index: int, state: str) -> bool:
        with self._state_lock:
            key = (execution_id, step_index)
            entry = self._dedup.get(key)
            if entry is None or entry.state == "PENDING":
                poked_flag = entry.successor_poked if entry else False
                self._dedup[key] = _DedupEntry(state=state, created_at=now_ms(),
                                               successor_poked=poked_flag)
                return True
            return False

    def _mark_done(self, execution_id: str, step_index: int) -> None:
        with self._state_lock:
            entry = self._dedup.get((execution_id, step_index))
            if entry is not None:
                entry.state = STATE_DONE

    # -- native poke interception ---------------------------------------------

    def _native_poke(self, envelope: InvocationEnvelope, arrival_ms: float) -> None:
        key = (envelope.execution_id, envelope.step_index)
        with self._state_lock:
            if key in self._slots or key in self._dedup and self._dedup[key].state in (
                    STATE_EXECUTING, STATE_DONE):
                return  # duplicate poke or step already executing: no-op
            slot = PrefetchSlot(envelope.execution_id, envelope.step_index, arrival_ms)
            self._slots[key] = slot
        threading.Thread(target=self._fill_slot, args=(slot, envelope),
                         name="slot-filler", daemon=True).start()

    def _fill_slot(self, slot: PrefetchSlot, envelope: InvocationEnvelope) -> None:
        """Platform-side staging: pre-warm, forward the poke down the chain,
        then download the step's pre-fetch refs. Never runs function code."""
        step = envelope.step()
        try:
            entry = self._lookup(step.function_name)
            slot.warm_done = self.pool.ensure_warm(step.function_name)
            if should_poke(envelope, entry.wrapper_config):
                if self.mark_successor_poked(envelope.execution_id, envelope.step_index):
                    slot.poke_forwarded_at = now_ms()
                    poke_successor(self, envelope)
            for i, ref in enumerate(step.prefetch):
                data = self.store.get(ref.store_region, ref.key)
                path = self._staging_dir / f"{envelope.execution_id}-{envelope.step_index}-{i}"
                path.write_bytes(data)
                slot.staged_paths.append((ref.store_region, ref.key, path))
        except NotFound as exc:
            slot.error = f"prefetch object missing: {exc}"
        except UnknownFunction as exc:
            slot.error = f"function not deployed: {exc}"
        except Exception as exc:  # staging must always unblock waiters
            log.error("slot staging failed", exc_info=True)
            slot.error = str(exc)
        finally:
            if slot.warm_done is None:
                slot.warm_done = now_ms()
            slot.mark_ready()

    def take_prefetch_slot(self, execution_id: str, step_index: int) -> PrefetchSlot | None:
        """Consume the slot for this execution step (at most once)."""
        with self._state_lock:
            slot = self._slots.get((execution_id, step_index))
            if slot is None or slot.consumed:
                return None
            slot.consumed = True
        return slot

    # -- invocation ------------------------------------------------------------

    def invoke(self, envelope: InvocationEnvelope,
               arrival_ms: float | None = None) -> tuple[int, dict | bytes]:
        """Route one envelope; returns (http_status, response body)."""
        arrival = arrival_ms if arrival_ms is not None else now_ms()
        envelope.validate()
        step = envelope.step()
        try:
            entry = self._lookup(step.function_name)
        except UnknownFunction:
            return 404, {"error": "unknown_function", "function": step.function_name}

        if envelope.phase == PHASE_POKE:
            if self.config.kind == KIND_NATIVE:
                self._native_poke(envelope, arrival)
            elif self._claim(envelope.execution_id, envelope.step_index, STATE_POKED):
                threading.Thread(
                    target=self._run_wrapper, args=(envelope, entry, arrival, True),
                    name="wrapper-poked", daemon=True).start()
            return 202, {"status": "accepted"}

        # EXECUTE
        if step.mode == MODE_SYNC and self.config.kind == KIND_OPAQUE:
            return 409, {"error": "sync_unsupported", "kind": self.config.kind}
        if self.pool.at_capacity(step.function_name):
            return 429, {"error": "capacity_exceeded", "function": step.function_name}
        if not self._claim(envelope.execution_id, envelope.step_index, STATE_EXECUTING):
            return 202, {"status": "duplicate_ignored"}
        if step.mode == MODE_SYNC:
            result = self._run_wrapper(envelope, entry, arrival, False)
            if result is None:
                return 500, {"error": "wrapper_crashed"}
            if result.error is not None:
                return 500, {"error": result.error.kind, "detail": result.error.detail}
            return 200, result.output or b""
        threading.Thread(target=self._run_wrapper, args=(envelope, entry, arrival, False),
                         name="wrapper-execute", daemon=True).start()
        return 202, {"status": "accepted"}

    def _run_wrapper(self, envelope: InvocationEnvelope, entry: _Deployed,
                     arrival_ms: float, poked: bool):
        try:
            return middleware.handle(envelope, entry.behavior, self,
                                     arrival_ms=arrival_ms, poked=poked)
        except Exception:  # a wrapper crash must never take the worker thread down
            log.error("wrapper for %s step %d crashed", envelope.execution_id,
                      envelope.step_index, exc_info=True)
            return None
        finally:
            self._mark_done(envelope.execution_id, envelope.step_index)

    def reclaim_idle(self) -> int:
        return self.pool.reclaim_idle()

    # -- housekeeping ------------------------------------------------------------

    def _janitor_loop(self) -> None:
        while not self._closed.wait(0.25):
            try:
                self.pool.reclaim_idle()
                self._sweep_state()
            except Exception:
                log.error("janitor pass failed", exc_info=True)

    def _sweep_state(self) -> None:
        horizon = now_ms() - self.profile.scale(DEDUP_EXPIRY_MS)
        with self._state_lock:
            for key in [k for k, e in self._dedup.items() if e.created_at < horizon]:
                del self._dedup[key]
            stale = [k for k, s in self._slots.items()
                     if s.created_at < horizon or s.consumed]
            for key in stale:
                slot = self._slots.pop(key)
                for _, _, path in slot.staged_paths:
                    path.unlink(missing_ok=True)

    def close(self) -> None:
        self._closed.set()
        self._janitor.join(timeout=2)
        shutil.rmtree(self._staging_dir, ignore_errors=True)


# ---------------------------------------------------------------------------
# HTTP front end


def _make_handler(engine: FaasNode) -> type[ServiceHandler]:
    class NodeRequestHandler(ServiceHandler):
        def do_POST(self) -> None:  # noqa: N802
            path = self.path.split("?", 1)[0]
            if path == "/admin/deploy":
                try:
                    engine.deploy_from_json(json.loads(self.read_body() or b"{}"))
                except (InvalidPackage, ValueError) as exc:
                    self.send_json(400, {"error": "invalid_package", "detail": str(exc)})
                else:
                    self.send_json(200, {"status": "deployed"})
                return
            if path == "/admin/reclaim":
                self.send_json(200, {"reclaimed": engine.reclaim_idle()})
                return
            if path.startswith("/fn/"):
                function = path[len("/fn/"):]
                try:
                    envelope = InvocationEnvelope.from_bytes(self.read_body())
                except EnvelopeError as exc:
                    self.send_json(400, {"error": "invalid_envelope", "detail": str(exc)})
                    return
                if envelope.step().function_name != function:
                    self.send_json(400, {"error": "invalid_envelope",
                                         "detail": "envelope step does not match URL function"})
                    return
                status, body = engine.invoke(envelope)
                if isinstance(body, bytes):
                    self.send_bytes(status, body,
                                    extra_headers={"X-Execution-Id": envelope.execution_id})
                else:
                    self.send_json(status, body)
                return
            self.send_json(404, {"error": "no_such_route"})

        def do_DELETE(self) -> None:  # noqa: N802
            path = self.path.split("?", 1)[0]
            if path.startswith("/admin/functions/"):
                name = path[len("/admin/functions/"):]
                engine.undeploy(name)
                self.send_json(200, {"status": "removed", "function": name})
                return
            self.send_json(404, {"error": "no_such_route"})

        def do_GET(self) -> None:  # noqa: N802
            path, _, query = self.path.partition("?")
            if path == "/healthz":
                self.send_json(200, {"status": "ok", "kind": engine.config.kind,
                                     "region": engine.config.region, "name": engine.name})
                return
            if path == "/admin/functions":
                self.send_json(200, {"functions": engine.functions()})
                return
            if path == "/metrics":
                clear = "clear=1" in query
                lines = "".join(json.dumps(doc, sort_keys=True) + "\n"
                                for doc in engine.measurements(clear=clear))
                self.send_bytes(200, lines.encode("utf-8"),
                                content_type="application/x-ndjson")
                return
            self.send_json(404, {"error": "no_such_route"})

    return NodeRequestHandler


class NodeServer(HttpService):
    """HTTP front end for a FaasNode engine."""

    def __init__(self, engine: FaasNode, host: str = "127.0.0.1", port: int = 0):
        super().__init__(host, port, _make_handler(engine))
        self.engine = engine

    @property
    def url(self) -> str:
        return f"http://{self.address}"

    def stop(self) -> None:
        super().stop()
        self.engine.close()
