"""Choreography wrapper co-deployed with every function.

Per EXECUTE the wrapper: pokes the successor (so it can pre-warm and
pre-fetch), resolves its own input, downloads any data dependency that was not
staged already, runs the synthetic handler, passes its output to the successor
(inline for native targets, via the object store for opaque ones), and emits a
per-step measurement. A POKE on an opaque node starts the same wrapper early:
it pre-fetches, then waits on the store for its input and continues, and the
later duplicate EXECUTE is ignored.

Handler outputs are pseudo-random bytes seeded by (execution_id, step_index),
so results are byte-identical across reruns and placements.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import random
import threading
from dataclasses import dataclass, field

from . import _http
from .netsim import RegionProfile, now_ms
from .specs import (
    MODE_SYNC,
    ObjectRef,
    StepSpec,
    WorkflowSpec,
    parse_workflow_spec,
)
from .store import NotFound, PollTimeout

log = logging.getLogger(__name__)

PHASE_POKE = "POKE"
PHASE_EXECUTE = "EXECUTE"
PHASES = (PHASE_POKE, PHASE_EXECUTE)

DEFAULT_POLL_INTERVAL_MS = 50
DEFAULT_POLL_TIMEOUT_MS = 60_000
DEFAULT_PASS_RETRY_BACKOFF_MS = 250

ERR_INPUT_TIMEOUT = "input_timeout"
ERR_DOWNLOAD_FAILED = "download_failed"
ERR_SUCCESSOR_UNREACHABLE = "successor_unreachable"


class EnvelopeError(ValueError):
    """The invocation envelope violates one of its invariants."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


# ---------------------------------------------------------------------------
# wire types


def exec_input_key(execution_id: str, step_index: int) -> str:
    return f"exec/{execution_id}/{step_index}/input"


def exec_done_key(execution_id: str) -> str:
    return f"exec/{execution_id}/done"


@dataclass(frozen=True)
class InvocationEnvelope:
    """Wire message carrying an execution's phase, input, and remaining workflow."""

    execution_id: str
    step_index: int
    phase: str
    workflow: WorkflowSpec
    input: bytes | None = None
    input_ref: ObjectRef | None = None

    def step(self) -> StepSpec:
        return self.workflow.steps[self.step_index]

    def successor(self) -> StepSpec | None:
        return self.workflow.successor(self.step_index)

    def validate(self) -> None:
        if not self.execution_id:
            raise EnvelopeError("execution_id", "must be non-empty")
        if self.phase not in PHASES:
            raise EnvelopeError("phase", f"must be one of {PHASES}")
        if not 0 <= self.step_index < len(self.workflow.steps):
            raise EnvelopeError("step_index",
                                f"{self.step_index} out of range for {len(self.workflow.steps)} steps")
        if self.phase == PHASE_POKE:
            if self.input is not None or self.input_ref is not None:
                raise EnvelopeError("input", "POKE must not carry input or input_ref")
            return
        has_inline = self.input is not None
        has_ref = self.input_ref is not None
        if self.step_index == 0:
            if not has_inline or has_ref:
                raise EnvelopeError("input", "step 0 EXECUTE carries the client input inline")
        elif has_inline == has_ref:
            raise EnvelopeError("input", "EXECUTE carries exactly one of input, input_ref")

    def to_json_dict(self) -> dict:
        doc: dict = {
            "execution_id": self.execution_id,
            "step_index": self.step_index,
            "phase": self.phase,
            "workflow": self.workflow.to_json_dict(),
        }
        if self.input is not None:
            doc["input_b64"] = base64.b64encode(self.input).decode("ascii")
        if self.input_ref is not None:
            doc["input_ref"] = self.input_ref.to_json_dict()
        return doc

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json_dict(), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_json_dict(cls, doc: dict) -> "InvocationEnvelope":
        try:
            workflow = parse_workflow_spec(json.dumps(doc["workflow"]))
            raw_ref = doc.get("input_ref")
            ref = None
            if raw_ref is not None:
                ref = ObjectRef(store_region=raw_ref["region"], key=raw_ref["key"])
            raw_input = doc.get("input_b64")
            payload = base64.b64decode(raw_input) if raw_input is not None else None
            env = cls(execution_id=str(doc["execution_id"]),
                      step_index=int(doc["step_index"]),
                      phase=str(doc["phase"]),
                      workflow=workflow,
                      input=payload,
                      input_ref=ref)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, EnvelopeError):
                raise
            raise EnvelopeError("$", f"malformed envelope: {exc}") from None
        env.validate()
        return env

    @classmethod
    def from_bytes(cls, raw: bytes) -> "InvocationEnvelope":
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise EnvelopeError("$", f"not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise EnvelopeError("$", "expected object")
        return cls.from_json_dict(doc)


@dataclass
class StepMeasurement:
    """Phase-boundary timestamps (epoch ms) for one step of one execution.

    Timestamps are non-decreasing in declaration order; fields that do not
    apply to a path stay None. ``input_resolved`` marks the moment the wrapper
    holds everything the handler needs (input in hand, staged data ready).
    """

    execution_id: str
    step_index: int
    function: str
    node_region: str
    poked: bool = False
    envelope_received: float | None = None
    cold_start_done: float | None = None
    prefetch_poke_sent: float | None = None
    download_done: float | None = None
    input_resolved: float | None = None
    compute_done: float | None = None
    successor_passed: float | None = None
    prefetch_wait_ms: float = 0.0

    def to_json_dict(self) -> dict:
        doc = {
            "execution_id": self.execution_id,
            "step_index": self.step_index,
            "function": self.function,
            "node_region": self.node_region,
            "poked": self.poked,
            "prefetch_wait_ms": round(self.prefetch_wait_ms, 3),
        }
        for name in ("envelope_received", "cold_start_done", "prefetch_poke_sent",
                     "download_done", "input_resolved", "compute_done",
                     "successor_passed"):
            value = getattr(self, name)
            if value is not None:
                doc[name] = round(value, 3)
        return doc


@dataclass(frozen=True)
class WrapperConfig:
    """Per-function middleware settings shipped inside the FunctionPackage."""

    poll_interval_ms: int = DEFAULT_POLL_INTERVAL_MS
    poll_timeout_ms: int = DEFAULT_POLL_TIMEOUT_MS
    pass_retry_backoff_ms: int = DEFAULT_PASS_RETRY_BACKOFF_MS
    prewarm: bool = False

    def to_json_dict(self) -> dict:
        return {
            "pass_retry_backoff_ms": self.pass_retry_backoff_ms,
            "poll_interval_ms": self.poll_interval_ms,
            "poll_timeout_ms": self.poll_timeout_ms,
            "prewarm": self.prewarm,
        }

    @classmethod
    def from_json_dict(cls, doc: dict | None) -> "WrapperConfig":
        doc = doc or {}
        return cls(
            poll_interval_ms=int(doc.get("poll_interval_ms", DEFAULT_POLL_INTERVAL_MS)),
            poll_timeout_ms=int(doc.get("poll_timeout_ms", DEFAULT_POLL_TIMEOUT_MS)),
            pass_retry_backoff_ms=int(doc.get("pass_retry_backoff_ms",
                                              DEFAULT_PASS_RETRY_BACKOFF_MS)),
            prewarm=bool(doc.get("prewarm", False)),
        )


@dataclass
class StepError:
    kind: str
    detail: str = ""


@dataclass
class StepResult:
    output: bytes | None
    measurement: StepMeasurement
    error: StepError | None = None


def deterministic_output(execution_id: str, step_index: int, size: int) -> bytes:
    """Handler output for (execution_id, step_index): identical across placements."""
    digest = hashlib.sha256(f"{execution_id}:{step_index}".encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "big")
    return random.Random(seed).randbytes(size)


# ---------------------------------------------------------------------------
# messaging


class Messenger:
    """Sends invocation envelopes with sender-side injected network delays.

    Inline payloads pay the full transfer delay; reference-only envelopes and
    pokes pay just the one-way message latency. For synchronous sends the
    return-path latency is paid after the response arrives.
    """

    def __init__(self, profile: RegionProfile, sender_region: str):
        self.profile = profile
        self.sender_region = sender_region

    def send_delay_ms(self, step: StepSpec, envelope: InvocationEnvelope) -> float:
        if envelope.input is not None:
            return float(self.profile.transfer_delay(self.sender_region, step.region,
                                                     len(envelope.input)))
        return self.profile.message_delay(self.sender_region, step.region)

    def send(self, step: StepSpec, envelope: InvocationEnvelope,
             sync: bool = False, timeout_s: float = _http.DEFAULT_TIMEOUT_S) -> _http.HttpResponse:
        self.profile.sleep_raw(self.send_delay_ms(step, envelope))
        resp = _http.post(f"http://{step.target}/fn/{step.function_name}",
                          body=envelope.to_bytes(),
                          headers={"Content-Type": "application/json",
                                   "X-Sender-Region": self.sender_region},
                          timeout_s=timeout_s)
        if sync:
            self.profile.sleep_raw(self.profile.message_delay(step.region, self.sender_region))
        return resp


def poke_successor(node, envelope: InvocationEnvelope) -> bool:
    """Fire-and-forget POKE to the successor step (one retry, never blocks).

    Returns False when there is nothing to poke. A lost poke only degrades
    the successor to its sequential path, so failures are logged, not raised.
    """
    successor = envelope.successor()
    if successor is None:
        return False
    poke = InvocationEnvelope(
        execution_id=envelope.execution_id,
        step_index=envelope.step_index + 1,
        phase=PHASE_POKE,
        workflow=envelope.workflow,
    )
    hook = getattr(node, "poke_fault_hook", None)
    if hook is not None and hook(poke):
        log.warning("poke dropped by fault hook: %s step %d",
                    poke.execution_id, poke.step_index)
        return True

    def _send() -> None:
        messenger = node.messenger
        for attempt in (0, 1):
            try:
                resp = messenger.send(successor, poke)
                if resp.status < 500:
                    return
            except OSError as exc:
                if attempt == 1:
                    log.warning("poke to %s failed twice: %s", successor.target, exc)
                    return
            except Exception:
                log.warning("poke to %s failed", successor.target, exc_info=True)
                return

    threading.Thread(target=_send, name="poke-sender", daemon=True).start()
    return True


def should_poke(envelope: InvocationEnvelope, wcfg: WrapperConfig) -> bool:
    successor = envelope.successor()
    if successor is None:
        return False
    return bool(successor.prefetch) or wcfg.prewarm


def resolve_input(envelope: InvocationEnvelope, node) -> bytes:
    """Return the step input from the channel the envelope selects.

    Inline bytes come back unchanged; an input_ref is polled from the store
    (the object may land slightly after the envelope on opaque paths).
    """
    if envelope.input is not None:
        return envelope.input
    if envelope.input_ref is None:
        raise EnvelopeError("input", "EXECUTE without input or input_ref")
    wcfg = node.wrapper_config(envelope.step().function_name)
    scale = node.profile.time_scale
    try:
        return node.store.poll(
            envelope.input_ref.store_region, envelope.input_ref.key,
            interval_ms=max(1.0, wcfg.poll_interval_ms * scale),
            timeout_ms=max(1.0, wcfg.poll_timeout_ms * scale))
    except PollTimeout as exc:
        raise InputTimeout(str(exc)) from None


class InputTimeout(TimeoutError):
    """The wrapper gave up waiting for its input object."""


class DownloadFailed(RuntimeError):
    """A declared data dependency could not be fetched."""


# ---------------------------------------------------------------------------
# wrapper execution


class _StepRun:
    """One wrapper execution for (execution_id, step_index) on a node."""

    def __init__(self, node, envelope: InvocationEnvelope, behavior, wcfg: WrapperConfig,
                 arrival_ms: float, poked: bool):
        self.node = node
        self.env = envelope
        self.behavior = behavior
        self.wcfg = wcfg
        self.poked = poked
        self.m = StepMeasurement(
            execution_id=envelope.execution_id,
            step_index=envelope.step_index,
            function=envelope.step().function_name,
            node_region=node.config.region,
            poked=poked,
            envelope_received=arrival_ms,
        )
        self._instance = None
        self._staged: set[tuple[str, str]] = set()

    # -- shared pieces ---------------------------------------------------

    def _acquire_instance(self) -> None:
        self._instance = self.node.pool.acquire(self.env.step().function_name)
        self.m.cold_start_done = now_ms()

    def _release_instance(self) -> None:
        if self._instance is not None:
            self.node.pool.release(self._instance, self.env.step().function_name)
            self._instance = None

    def _maybe_poke_successor(self) -> None:
        if not should_poke(self.env, self.wcfg):
            return
        if self.node.mark_successor_poked(self.env.execution_id, self.env.step_index):
            self.m.prefetch_poke_sent = now_ms()
            poke_successor(self.node, self.env)

    def _download_dependency(self) -> None:
        dep = self.behavior.data_dependency
        if dep is None:
            return
        ref, declared_size = dep
        if (ref.store_region, ref.key) in self._staged:
            return
        try:
            data = self.node.store.get(ref.store_region, ref.key)
        except NotFound:
            raise DownloadFailed(f"{ref.store_region}:{ref.key} not found") from None
        if len(data) != declared_size:
            log.warning("dependency %s:%s is %d bytes, behavior declares %d",
                        ref.store_region, ref.key, len(data), declared_size)
        self._staged.add((ref.store_region, ref.key))

    def _run_handler(self) -> bytes:
        self.node.count_handler_run(self.env.execution_id, self.env.step_index)
        self.node.profile.sleep_scaled(self.behavior.compute_ms)
        output = deterministic_output(self.env.execution_id, self.env.step_index,
                                      self.behavior.output_bytes)
        self.m.compute_done = now_ms()
        return output

    def _pass_to_successor(self, output: bytes) -> bytes | None:
        """Hand output to the next step; returns the downstream body for SYNC chains."""
        successor = self.env.successor()
        assert successor is not None
        next_index = self.env.step_index + 1
        sync = successor.mode == MODE_SYNC
        if self.node.kind_of(successor) == "native":
            envelope = InvocationEnvelope(
                execution_id=self.env.execution_id, step_index=next_index,
                phase=PHASE_EXECUTE, workflow=self.env.workflow, input=output)
        else:
            key = exec_input_key(self.env.execution_id, next_index)
            self.node.store.put(successor.region, key, output)
            envelope = InvocationEnvelope(
                execution_id=self.env.execution_id, step_index=next_index,
                phase=PHASE_EXECUTE, workflow=self.env.workflow,
                input_ref=ObjectRef(store_region=successor.region, key=key))
        last_error = ""
        for attempt in (0, 1):
            try:
                resp = self.node.messenger.send(successor, envelope, sync=sync)
            except OSError as exc:
                last_error = str(exc)
            else:
                if resp.status in (200, 202):
                    self.m.successor_passed = now_ms()
                    return resp.body if sync else None
                last_error = f"HTTP {resp.status}"
            if attempt == 0:
                self.node.profile.sleep_scaled(self.wcfg.pass_retry_backoff_ms)
        raise SuccessorUnreachable(f"{successor.target}: {last_error}")

    def _write_terminal(self, status: str, completed_at: float,
                        output: bytes | None = None,
                        error: StepError | None = None,
                        asynchronous: bool = False) -> None:
        record = {
            "execution_id": self.env.execution_id,
            "workflow_id": self.env.workflow.workflow_id,
            "status": status,
            "completed_at_ms": round(completed_at, 3),
            "steps": len(self.env.workflow.steps),
        }
        if output is not None:
            record["final_output_sha256"] = hashlib.sha256(output).hexdigest()
            record["final_output_b64"] = base64.b64encode(output).decode("ascii")
        if error is not None:
            record["error"] = {"step": self.env.step_index, "kind": error.kind,
                               "detail": error.detail}
        data = json.dumps(record, sort_keys=True).encode("utf-8")
        last_region = self.env.workflow.steps[-1].region

        def _put() -> None:
            try:
                self.node.store.put(last_region, exec_done_key(self.env.execution_id), data)
            except Exception:
                log.error("terminal record write failed for %s",
                          self.env.execution_id, exc_info=True)

        if asynchronous:
            threading.Thread(target=_put, name="terminal-writer", daemon=True).start()
        else:
            _put()

    def _finish(self, output: bytes, sync_response: bool) -> StepResult:
        """Handler done: pass onward or write the terminal record, then emit."""
        downstream: bytes | None = None
        if self.env.successor() is not None:
            downstream = self._pass_to_successor(output)
        else:
            # completion time is the handler finish, not the record write
            self._write_terminal("ok", self.m.compute_done, output=output,
                                 asynchronous=sync_response)
        self.node.emit_measurement(self.m)
        return StepResult(output=downstream if downstream is not None else output,
                          measurement=self.m)

    def _fail(self, kind: str, detail: str) -> StepResult:
        log.warning("step %d of %s failed: %s (%s)", self.env.step_index,
                    self.env.execution_id, kind, detail)
        error = StepError(kind=kind, detail=detail)
        self._write_terminal("error", now_ms(), error=error)
        self.node.emit_measurement(self.m)
        return StepResult(output=None, measurement=self.m, error=error)

    # -- entry points ------------------------------------------------------

    def run_execute(self) -> StepResult:
        """Direct EXECUTE path (step 0, un-poked steps, and native slot consumers)."""
        try:
            self._acquire_instance()
            self._maybe_poke_successor()
            slot = None
            if self.node.config.kind == "native":
                slot = self.node.take_prefetch_slot(self.env.execution_id, self.env.step_index)
            if slot is not None:
                # if the platform is still staging, the wrapper blocks here;
                # that wait is the double-billing cost the measurement records
                scale = self.node.profile.time_scale
                self.m.prefetch_wait_ms = slot.wait_until_ready(
                    timeout_s=self.wcfg.poll_timeout_ms * scale / 1000.0)
                self.m.poked = True
                self.m.envelope_received = min(self.m.envelope_received, slot.poke_arrival)
                self.m.cold_start_done = slot.warm_done
                if slot.poke_forwarded_at is not None:
                    self.m.prefetch_poke_sent = slot.poke_forwarded_at
                self.m.download_done = slot.ready_at
                if slot.error is not None:
                    return self._fail(ERR_DOWNLOAD_FAILED, slot.error)
                self._staged.update(slot.staged_refs())
            try:
                input_bytes = resolve_input(self.env, self.node)
            except InputTimeout as exc:
                return self._fail(ERR_INPUT_TIMEOUT, str(exc))
            try:
                self._download_dependency()
            except DownloadFailed as exc:
                return self._fail(ERR_DOWNLOAD_FAILED, str(exc))
            if self.behavior.data_dependency is not None and self.m.download_done is None:
                self.m.download_done = now_ms()
            self.m.input_resolved = now_ms()
            del input_bytes  # synthetic handler: content feeds nothing downstream
            output = self._run_handler()
            try:
                return self._finish(output, sync_response=self.env.step().mode == MODE_SYNC)
            except SuccessorUnreachable as exc:
                return self._fail(ERR_SUCCESSOR_UNREACHABLE, str(exc))
        finally:
            self._release_instance()

    def run_poked(self) -> StepResult:
        """Opaque-node POKE continuation: pre-fetch, wait for input, then execute.

        The later duplicate EXECUTE for this (execution_id, step_index) is
        ignored by the node's dedup table; this wrapper owns the step.
        """
        try:
            self._acquire_instance()
            self._maybe_poke_successor()
            try:
                self._download_dependency()
            except DownloadFailed as exc:
                return self._fail(ERR_DOWNLOAD_FAILED, str(exc))
            if self.behavior.data_dependency is not None:
                self.m.download_done = now_ms()
            scale = self.node.profile.time_scale
            key = exec_input_key(self.env.execution_id, self.env.step_index)
            try:
                self.node.store.poll(
                    self.env.step().region, key,
                    interval_ms=max(1.0, self.wcfg.poll_interval_ms * scale),
                    timeout_ms=max(1.0, self.wcfg.poll_timeout_ms * scale))
            except PollTimeout as exc:
                return self._fail(ERR_INPUT_TIMEOUT, str(exc))
            self.m.input_resolved = now_ms()
            output = self._run_handler()
            try:
                return self._finish(output, sync_response=False)
            except SuccessorUnreachable as exc:
                return self._fail(ERR_SUCCESSOR_UNREACHABLE, str(exc))
        finally:
            self._release_instance()


class SuccessorUnreachable(RuntimeError):
    """Passing to the next step failed after the bounded retry."""


def handle(envelope: InvocationEnvelope, behavior, node, *, arrival_ms: float | None = None,
           poked: bool = False) -> StepResult:
    """Run the wrapper for one step; main middleware entry point.

    ``poked=True`` selects the POKE continuation (opaque pre-fetch path);
    otherwise this is the direct EXECUTE path.
    """
    wcfg = node.wrapper_config(envelope.step().function_name)
    run = _StepRun(node, envelope, behavior, wcfg,
                   arrival_ms=arrival_ms if arrival_ms is not None else now_ms(),
                   poked=poked)
    return run.run_poked() if poked else run.run_execute()
