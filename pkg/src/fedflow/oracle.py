"""Analytic event model predicting end-to-end chain durations.

Mirrors the middleware semantics: a poked step pre-warms and pre-fetches from
the moment the poke lands, and its compute phase starts once both its staged
data and its predecessor's output are available. Predictions are in unscaled
(simulated) milliseconds, independent of the profile's time_scale.

Critical-path rules, step i (times relative to the client send):
  exec_arrival   inline passes pay a full transfer delay, store passes pay the
                 put transfer followed by the envelope's message latency
  wrapper_start  first envelope (poke if poked, else execute) + cold start
  ready          wrapper_start + dependency download (poked steps only)
  compute_start  native: max(exec_arrival, ready)
                 opaque poked: max(ready, put_done) + same-region input get
                 un-poked: wrapper_start + input get (opaque) + dependency dl
  done           compute_start + compute; total = last step's done
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .netsim import RegionProfile
from .specs import (
    KIND_NATIVE,
    KIND_OPAQUE,
    DeploymentSpec,
    WorkflowSpec,
)


@dataclass(frozen=True)
class OracleStep:
    """Everything the model needs to know about one chain step."""

    region: str
    kind: str
    compute_ms: float
    output_bytes: int
    cold_ms: float = 0.0
    warm: bool = True
    dep_region: str | None = None
    dep_bytes: int = 0
    poked: bool = False


@dataclass
class StepEvents:
    exec_arrival: float
    wrapper_start: float
    compute_start: float
    done: float
    poke_arrival: float | None = None
    ready: float | None = None
    put_done: float | None = None


@dataclass
class ChainPrediction:
    total_ms: float
    steps: list[StepEvents] = field(default_factory=list)


class _Delays:
    """Unscaled delay lookups over a region profile."""

    def __init__(self, profile: RegionProfile):
        self.profile = profile

    def msg(self, a: str, b: str) -> float:
        return self.profile.raw_latency_ms(a, b)

    def xfer(self, a: str, b: str, size: int) -> float:
        return math.ceil(self.msg(a, b) + size / self.profile.raw_bandwidth(a, b) * 1000.0)


def predict_chain(profile: RegionProfile, client_region: str, input_bytes: int,
                  steps: list[OracleStep]) -> ChainPrediction:
    """Evaluate the event recurrence for one chain configuration."""
    if not steps:
        raise ValueError("chain must have at least one step")
    d = _Delays(profile)
    events: list[StepEvents] = []
    for i, step in enumerate(steps):
        cold_wait = 0.0 if step.warm else step.cold_ms
        dep_dl = (d.xfer(step.dep_region, step.region, step.dep_bytes)
                  if step.dep_region is not None else 0.0)
        if i == 0:
            exec_arrival = d.xfer(client_region, step.region, input_bytes)
            put_done = None
            poke_arrival = None
        else:
            prev = steps[i - 1]
            prev_done = events[i - 1].done
            pass_transfer = d.xfer(prev.region, step.region, prev.output_bytes)
            if step.kind == KIND_NATIVE:
                exec_arrival = prev_done + pass_transfer
                put_done = None
            else:
                put_done = prev_done + pass_transfer
                exec_arrival = put_done + d.msg(prev.region, step.region)
            # pokes cascade: step i-1 sends ours as soon as its wrapper starts
            poke_arrival = (events[i - 1].wrapper_start + d.msg(prev.region, step.region)
                            if step.poked else None)

        if step.poked and poke_arrival is not None:
            wrapper_start = poke_arrival + cold_wait
            ready = wrapper_start + dep_dl
            if step.kind == KIND_NATIVE:
                compute_start = max(exec_arrival, ready)
            else:
                assert put_done is not None
                pickup = max(ready, put_done)
                compute_start = pickup + d.xfer(step.region, step.region,
                                                steps[i - 1].output_bytes)
        else:
            wrapper_start = exec_arrival + cold_wait
            ready = None
            input_get = 0.0
            if i > 0 and step.kind == KIND_OPAQUE:
                input_get = d.xfer(step.region, step.region, steps[i - 1].output_bytes)
            compute_start = wrapper_start + input_get + dep_dl
        done = compute_start + step.compute_ms
        events.append(StepEvents(exec_arrival=exec_arrival, wrapper_start=wrapper_start,
                                 compute_start=compute_start, done=done,
                                 poke_arrival=poke_arrival, ready=ready, put_done=put_done))
    return ChainPrediction(total_ms=events[-1].done, steps=events)


def steps_from_specs(workflow: WorkflowSpec, deployment: DeploymentSpec,
                     node_configs: dict[str, tuple[str, float]],
                     assume_warm: bool = True, prewarm: bool = False) -> list[OracleStep]:
    """Build the model inputs from a workflow variant plus deployment/node facts.

    ``node_configs`` maps node address -> (kind, cold_start_ms). A step is
    poked when its prefetch list is non-empty (or pre-warming is forced),
    except step 0, which clients always invoke directly.
    """
    steps: list[OracleStep] = []
    for i, step in enumerate(workflow.steps):
        behavior = deployment.behaviors.get(step.function_name)
        if behavior is None:
            raise KeyError(f"no behavior for function {step.function_name!r}")
        if step.target not in node_configs:
            raise KeyError(f"no node config for target {step.target!r}")
        kind, cold_ms = node_configs[step.target]
        dep_region = None
        dep_bytes = 0
        if behavior.data_dependency is not None:
            ref, size = behavior.data_dependency
            dep_region, dep_bytes = ref.store_region, size
        steps.append(OracleStep(
            region=step.region, kind=kind,
            compute_ms=float(behavior.compute_ms),
            output_bytes=behavior.output_bytes,
            cold_ms=float(cold_ms), warm=assume_warm,
            dep_region=dep_region, dep_bytes=dep_bytes,
            poked=i > 0 and (bool(step.prefetch) or prewarm)))
    return steps


def predict_workflow(profile: RegionProfile, workflow: WorkflowSpec,
                     deployment: DeploymentSpec, node_configs: dict[str, tuple[str, float]],
                     client_region: str, input_bytes: int,
                     assume_warm: bool = True, prewarm: bool = False) -> ChainPrediction:
    steps = steps_from_specs(workflow, deployment, node_configs,
                             assume_warm=assume_warm, prewarm=prewarm)
    return predict_chain(profile, client_region, input_bytes, steps)


def improvement_fraction(baseline_ms: float, optimized_ms: float) -> float:
    if baseline_ms <= 0:
        raise ValueError("baseline must be positive")
    return (baseline_ms - optimized_ms) / baseline_ms
