"""Workflow client: starts executions, generates open-loop load, collects durations.

End-to-end duration is client-observed: send time to the completion timestamp
carried inside the terminal record (or the SYNC response). Detecting the
terminal record costs extra store polling, but that detection lag never
inflates the measured duration because the completion time comes from the
record's content.
"""

from __future__ import annotations

import csv
import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

from .middleware import PHASE_EXECUTE, InvocationEnvelope, Messenger, exec_done_key
from .netsim import RegionProfile, now_ms
from .specs import MODE_SYNC, WorkflowSpec, workflow_fingerprint
from .store import NotFound, StoreClient

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 120_000
TERMINAL_POLL_INTERVAL_MS = 25

STATUS_OK = "ok"
STATUS_TIMEOUT = "timeout"


class WorkflowTimeout(TimeoutError):
    """The execution did not produce a terminal record within the deadline."""


@dataclass
class RunRecord:
    """One timed workflow execution."""

    execution_id: str
    start_ms: float
    end_ms: float
    total_ms: float
    status: str
    spec_fingerprint: str
    scheduled_ms: float | None = None  # load runs: planned send time
    final_output_b64: str | None = None

    def csv_row(self) -> list:
        return [self.execution_id, f"{self.start_ms:.3f}", f"{self.end_ms:.3f}",
                f"{self.total_ms:.3f}", self.status]


CSV_COLUMNS = ["execution_id", "start_ms", "end_ms", "total_ms", "status"]


class WorkflowClient:
    """Invokes workflows against running nodes, from a declared client region."""

    def __init__(self, profile: RegionProfile, client_region: str, store_url: str):
        self.profile = profile
        self.client_region = client_region
        self.messenger = Messenger(profile, client_region)
        self.store = StoreClient(store_url, caller_region=client_region)

    def invoke_once(self, spec: WorkflowSpec, input_bytes: bytes,
                    timeout_ms: float = DEFAULT_TIMEOUT_MS,
                    execution_id: str | None = None) -> RunRecord:
        """Start one execution and wait for its completion record.

        SYNC first steps return the final output in the invoke response; ASYNC
        chains are watched via the terminal record in the last step's region.
        """
        execution_id = execution_id or uuid.uuid4().hex
        fingerprint = workflow_fingerprint(spec)
        envelope = InvocationEnvelope(
            execution_id=execution_id, step_index=0, phase=PHASE_EXECUTE,
            workflow=spec, input=input_bytes)
        first = spec.steps[0]
        sync = first.mode == MODE_SYNC
        start = now_ms()
        timeout_wall_ms = timeout_ms * self.profile.time_scale
        resp = self.messenger.send(first, envelope, sync=sync,
                                   timeout_s=timeout_wall_ms / 1000.0 + 30.0)
        if sync:
            if resp.status != 200:
                raise RuntimeError(f"sync invoke failed: HTTP {resp.status} {resp.body[:200]!r}")
            end = now_ms()
            return RunRecord(execution_id=execution_id, start_ms=start, end_ms=end,
                             total_ms=end - start, status=STATUS_OK,
                             spec_fingerprint=fingerprint)
        if resp.status not in (200, 202):
            raise RuntimeError(f"invoke rejected: HTTP {resp.status} {resp.body[:200]!r}")
        record = self._await_terminal(spec, execution_id, start, timeout_wall_ms)
        return RunRecord(
            execution_id=execution_id, start_ms=start,
            end_ms=record["completed_at_ms"],
            total_ms=record["completed_at_ms"] - start,
            status=STATUS_OK if record.get("status") == "ok"
            else f"error:{record.get('error', {}).get('kind', 'unknown')}",
            spec_fingerprint=fingerprint,
            final_output_b64=record.get("final_output_b64"))

    def _await_terminal(self, spec: WorkflowSpec, execution_id: str,
                        start_ms: float, timeout_wall_ms: float) -> dict:
        key = exec_done_key(execution_id)
        region = spec.steps[-1].region
        deadline = time.perf_counter() + timeout_wall_ms / 1000.0
        while True:
            remaining_ms = (deadline - time.perf_counter()) * 1000.0
            if remaining_ms <= 0:
                raise WorkflowTimeout(f"{execution_id} after {timeout_wall_ms:.0f} ms")
            wait_ms = min(remaining_ms, 5_000.0)
            try:
                raw = self.store.get(region, key, wait_ms=wait_ms)
            except NotFound:
                continue
            return json.loads(raw.decode("utf-8"))

    def run_load(self, spec: WorkflowSpec, input_bytes: bytes, rate_per_s: float,
                 duration_s: float, timeout_ms: float = DEFAULT_TIMEOUT_MS) -> list[RunRecord]:
        """Open-loop arrivals: sends stay on schedule regardless of completions.

        rate and duration are in simulated time; wall spacing is scaled by the
        profile's time_scale. Failures are flagged records, never gaps.
        """
        if rate_per_s <= 0:
            raise ValueError("rate_per_s must be > 0")
        count = int(rate_per_s * duration_s)
        interval_wall_s = (1.0 / rate_per_s) * self.profile.time_scale
        records: list[RunRecord | None] = [None] * count
        threads: list[threading.Thread] = []
        t0 = time.perf_counter()
        wall0 = now_ms()

        def _one(slot: int, scheduled_ms: float) -> None:
            execution_id = uuid.uuid4().hex
            try:
                record = self.invoke_once(spec, input_bytes, timeout_ms=timeout_ms,
                                          execution_id=execution_id)
            except WorkflowTimeout:
                record = RunRecord(execution_id=execution_id, start_ms=scheduled_ms,
                                   end_ms=now_ms(), total_ms=float("nan"),
                                   status=STATUS_TIMEOUT,
                                   spec_fingerprint=workflow_fingerprint(spec))
            except Exception as exc:
                log.warning("load run %d failed: %s", slot, exc)
                record = RunRecord(execution_id=execution_id, start_ms=scheduled_ms,
                                   end_ms=now_ms(), total_ms=float("nan"),
                                   status=f"error:{type(exc).__name__}",
                                   spec_fingerprint=workflow_fingerprint(spec))
            record.scheduled_ms = scheduled_ms
            records[slot] = record

        for i in range(count):
            target = t0 + i * interval_wall_s
            delay = target - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            thread = threading.Thread(target=_one, name=f"load-{i}",
                                      args=(i, wall0 + i * interval_wall_s * 1000.0),
                                      daemon=True)
            thread.start()
            threads.append(thread)
        join_deadline = time.perf_counter() + timeout_ms * self.profile.time_scale / 1000.0 + 30.0
        for thread in threads:
            thread.join(timeout=max(0.0, join_deadline - time.perf_counter()))
        out: list[RunRecord] = []
        for i, record in enumerate(records):
            if record is None:  # worker never reported (should not happen)
                record = RunRecord(execution_id=f"missing-{i}", start_ms=0.0, end_ms=0.0,
                                   total_ms=float("nan"), status="error:unreported",
                                   spec_fingerprint=workflow_fingerprint(spec))
            out.append(record)
        return out


def write_records_csv(records: list[RunRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for record in records:
            writer.writerow(record.csv_row())
