"""Workflow, deployment, and function-behavior specifications.

The wire format is JSON. ``encode_workflow_spec`` produces the canonical byte
form (sorted keys, no insignificant whitespace, optional fields materialized
with their defaults), so parse(encode(s)) == s and two documents differing only
in key order encode identically.

All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

MODE_SYNC = "SYNC"
MODE_ASYNC = "ASYNC"
MODES = (MODE_SYNC, MODE_ASYNC)

KIND_NATIVE = "native"
KIND_OPAQUE = "opaque"
KINDS = (KIND_NATIVE, KIND_OPAQUE)

MAX_KEY_BYTES = 512

_ADDRESS_RE = re.compile(r"^[A-Za-z0-9_.\-]+:(\d{1,5})$")


class SchemaError(ValueError):
    """The document is structurally malformed (bad JSON, types, or keys)."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class ValidationError(ValueError):
    """The document parses but violates a model invariant."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class ObjectRef:
    """Reference to an object in a single store region."""

    store_region: str
    key: str

    def validate(self, path: str = "ref") -> None:
        if not self.store_region:
            raise ValidationError(f"{path}.region", "region must be non-empty")
        if not self.key:
            raise ValidationError(f"{path}.key", "key must be non-empty")
        if any(c.isspace() for c in self.key):
            raise ValidationError(f"{path}.key", "key must not contain whitespace")
        if len(self.key.encode("utf-8")) > MAX_KEY_BYTES:
            raise ValidationError(f"{path}.key", f"key exceeds {MAX_KEY_BYTES} bytes")

    def to_json_dict(self) -> dict:
        return {"key": self.key, "region": self.store_region}


@dataclass(frozen=True)
class StepSpec:
    """One step of a workflow chain."""

    function_name: str
    target: str                     # node address, host:port
    region: str                     # declared region of the target node
    prefetch: tuple[ObjectRef, ...] = ()
    mode: str = MODE_ASYNC

    def to_json_dict(self) -> dict:
        return {
            "function": self.function_name,
            "mode": self.mode,
            "prefetch": [r.to_json_dict() for r in self.prefetch],
            "region": self.region,
            "target": self.target,
        }


@dataclass(frozen=True)
class WorkflowSpec:
    """An ordered chain of steps; carried inside every invocation."""

    workflow_id: str
    steps: tuple[StepSpec, ...]

    def successor(self, index: int) -> StepSpec | None:
        nxt = index + 1
        return self.steps[nxt] if nxt < len(self.steps) else None

    def to_json_dict(self) -> dict:
        return {
            "steps": [s.to_json_dict() for s in self.steps],
            "workflow_id": self.workflow_id,
        }


@dataclass(frozen=True)
class FunctionBehavior:
    """Synthetic behavior of a deployed function."""

    compute_ms: int
    output_bytes: int
    data_dependency: tuple[ObjectRef, int] | None = None  # (ref, size_bytes)

    def to_json_dict(self) -> dict:
        dep = None
        if self.data_dependency is not None:
            ref, size = self.data_dependency
            dep = {"key": ref.key, "region": ref.store_region, "size_bytes": size}
        return {
            "compute_ms": self.compute_ms,
            "data_dependency": dep,
            "output_bytes": self.output_bytes,
        }


@dataclass(frozen=True)
class DeploymentTarget:
    """A node that hosts a function: address, declared region, platform kind."""

    address: str
    region: str
    kind: str = KIND_OPAQUE

    def to_json_dict(self) -> dict:
        return {"address": self.address, "kind": self.kind, "region": self.region}


@dataclass(frozen=True)
class DeploymentSpec:
    """Which function runs where, plus per-function behaviors."""

    deployments: dict[str, tuple[DeploymentTarget, ...]] = field(default_factory=dict)
    behaviors: dict[str, FunctionBehavior] = field(default_factory=dict)

    def node_kinds(self) -> dict[str, str]:
        """Map node address -> kind, from every deployment entry."""
        kinds: dict[str, str] = {}
        for targets in self.deployments.values():
            for t in targets:
                kinds[t.address] = t.kind
        return kinds

    def node_addresses(self) -> list[str]:
        seen: list[str] = []
        for targets in self.deployments.values():
            for t in targets:
                if t.address not in seen:
                    seen.append(t.address)
        return seen

    def to_json_dict(self) -> dict:
        return {
            "behaviors": {n: b.to_json_dict() for n, b in sorted(self.behaviors.items())},
            "deployments": {
                n: [t.to_json_dict() for t in targets]
                for n, targets in sorted(self.deployments.items())
            },
        }


@dataclass(frozen=True)
class Violation:
    """A spec/deployment mismatch found by validate_against_deployment."""

    step: int
    reason: str      # NOT_DEPLOYED | UNKNOWN_FUNCTION | SYNC_ON_OPAQUE
    detail: str = ""


NOT_DEPLOYED = "NOT_DEPLOYED"
UNKNOWN_FUNCTION = "UNKNOWN_FUNCTION"
SYNC_ON_OPAQUE = "SYNC_ON_OPAQUE"


# ---------------------------------------------------------------------------
# parsing helpers


def _require_dict(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise SchemaError(path, f"expected object, got {type(value).__name__}")
    return value


def _require_list(value, path: str) -> list:
    if not isinstance(value, list):
        raise SchemaError(path, f"expected array, got {type(value).__name__}")
    return value


def _require_str(value, path: str) -> str:
    if not isinstance(value, str):
        raise SchemaError(path, f"expected string, got {type(value).__name__}")
    return value


def _require_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(path, f"expected integer, got {type(value).__name__}")
    return value


def _reject_unknown_keys(doc: dict, allowed: set[str], path: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        key = sorted(unknown)[0]
        raise SchemaError(f"{path}.{key}", "unknown key")


def validate_address(address: str, path: str) -> None:
    m = _ADDRESS_RE.match(address)
    if not m or not (1 <= int(m.group(1)) <= 65535):
        raise ValidationError(path, f"not a valid host:port address: {address!r}")


def _parse_object_ref(doc, path: str) -> ObjectRef:
    doc = _require_dict(doc, path)
    _reject_unknown_keys(doc, {"region", "key"}, path)
    try:
        ref = ObjectRef(store_region=_require_str(doc["region"], f"{path}.region"),
                        key=_require_str(doc["key"], f"{path}.key"))
    except KeyError as exc:
        raise SchemaError(f"{path}.{exc.args[0]}", "missing key") from None
    ref.validate(path)
    return ref


def _parse_step(doc, path: str, known_kinds: dict[str, str] | None) -> StepSpec:
    doc = _require_dict(doc, path)
    _reject_unknown_keys(doc, {"function", "target", "region", "prefetch", "mode"}, path)
    for key in ("function", "target", "region"):
        if key not in doc:
            raise SchemaError(f"{path}.{key}", "missing key")
    function = _require_str(doc["function"], f"{path}.function")
    target = _require_str(doc["target"], f"{path}.target")
    region = _require_str(doc["region"], f"{path}.region")
    if not function:
        raise ValidationError(f"{path}.function", "must be non-empty")
    if not region:
        raise ValidationError(f"{path}.region", "must be non-empty")
    validate_address(target, f"{path}.target")
    mode = doc.get("mode", MODE_ASYNC)
    mode = _require_str(mode, f"{path}.mode")
    if mode not in MODES:
        raise ValidationError(f"{path}.mode", f"must be one of {MODES}, got {mode!r}")
    prefetch = tuple(
        _parse_object_ref(r, f"{path}.prefetch[{i}]")
        for i, r in enumerate(_require_list(doc.get("prefetch", []), f"{path}.prefetch"))
    )
    if mode == MODE_SYNC and known_kinds is not None:
        if known_kinds.get(target) == KIND_OPAQUE:
            raise ValidationError(f"{path}.mode", "SYNC is not supported on opaque targets")
    return StepSpec(function_name=function, target=target, region=region,
                    prefetch=prefetch, mode=mode)


# ---------------------------------------------------------------------------
# operations


def parse_workflow_spec(raw: bytes | str,
                        known_kinds: dict[str, str] | None = None) -> WorkflowSpec:
    """Parse and validate a workflow document.

    ``known_kinds`` optionally maps node address -> platform kind so that SYNC
    steps aimed at opaque nodes can be rejected at parse time; without it the
    check happens in validate_against_deployment and at the node itself.
    """
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError("$", f"not valid UTF-8: {exc}") from None
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"not valid JSON: {exc}") from None
    doc = _require_dict(doc, "$")
    _reject_unknown_keys(doc, {"workflow_id", "steps"}, "$")
    if "workflow_id" not in doc:
        raise SchemaError("$.workflow_id", "missing key")
    if "steps" not in doc:
        raise SchemaError("$.steps", "missing key")
    workflow_id = _require_str(doc["workflow_id"], "$.workflow_id")
    if not workflow_id:
        raise ValidationError("workflow_id", "must be non-empty")
    raw_steps = _require_list(doc["steps"], "$.steps")
    if not raw_steps:
        raise ValidationError("steps", "must contain at least one step")
    steps = tuple(
        _parse_step(s, f"steps[{i}]", known_kinds) for i, s in enumerate(raw_steps)
    )
    return WorkflowSpec(workflow_id=workflow_id, steps=steps)


def encode_workflow_spec(spec: WorkflowSpec) -> bytes:
    """Canonical encoding: sorted keys, compact separators, defaults explicit."""
    return json.dumps(spec.to_json_dict(), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def workflow_fingerprint(spec: WorkflowSpec) -> str:
    import hashlib

    return hashlib.sha256(encode_workflow_spec(spec)).hexdigest()[:16]


def _parse_behavior(doc, path: str) -> FunctionBehavior:
    doc = _require_dict(doc, path)
    _reject_unknown_keys(doc, {"compute_ms", "output_bytes", "data_dependency"}, path)
    compute_ms = _require_int(doc.get("compute_ms", 0), f"{path}.compute_ms")
    output_bytes = _require_int(doc.get("output_bytes", 0), f"{path}.output_bytes")
    if compute_ms < 0:
        raise ValidationError(f"{path}.compute_ms", "must be >= 0")
    if output_bytes < 0:
        raise ValidationError(f"{path}.output_bytes", "must be >= 0")
    dep = doc.get("data_dependency")
    dependency = None
    if dep is not None:
        dep = _require_dict(dep, f"{path}.data_dependency")
        _reject_unknown_keys(dep, {"region", "key", "size_bytes"}, f"{path}.data_dependency")
        ref = _parse_object_ref({"region": dep.get("region"), "key": dep.get("key")},
                                f"{path}.data_dependency")
        size = _require_int(dep.get("size_bytes", 0), f"{path}.data_dependency.size_bytes")
        if size < 0:
            raise ValidationError(f"{path}.data_dependency.size_bytes", "must be >= 0")
        dependency = (ref, size)
    return FunctionBehavior(compute_ms=compute_ms, output_bytes=output_bytes,
                            data_dependency=dependency)


def parse_function_behavior(doc, path: str = "behavior") -> FunctionBehavior:
    """Parse one behavior object (used by deployment specs and deploy payloads)."""
    return _parse_behavior(doc, path)


def parse_deployment_spec(raw: bytes | str) -> DeploymentSpec:
    """Parse and validate a deployment document."""
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"not valid JSON: {exc}") from None
    doc = _require_dict(doc, "$")
    _reject_unknown_keys(doc, {"deployments", "behaviors"}, "$")
    deployments: dict[str, tuple[DeploymentTarget, ...]] = {}
    for name, raw_targets in _require_dict(doc.get("deployments", {}), "$.deployments").items():
        targets = []
        for i, t in enumerate(_require_list(raw_targets, f"deployments.{name}")):
            t = _require_dict(t, f"deployments.{name}[{i}]")
            _reject_unknown_keys(t, {"address", "region", "kind"}, f"deployments.{name}[{i}]")
            address = _require_str(t.get("address", ""), f"deployments.{name}[{i}].address")
            validate_address(address, f"deployments.{name}[{i}].address")
            region = _require_str(t.get("region", ""), f"deployments.{name}[{i}].region")
            if not region:
                raise ValidationError(f"deployments.{name}[{i}].region", "must be non-empty")
            kind = _require_str(t.get("kind", KIND_OPAQUE), f"deployments.{name}[{i}].kind")
            if kind not in KINDS:
                raise ValidationError(f"deployments.{name}[{i}].kind",
                                      f"must be one of {KINDS}, got {kind!r}")
            targets.append(DeploymentTarget(address=address, region=region, kind=kind))
        deployments[name] = tuple(targets)
    behaviors = {
        name: _parse_behavior(b, f"behaviors.{name}")
        for name, b in _require_dict(doc.get("behaviors", {}), "$.behaviors").items()
    }
    for name in deployments:
        if name not in behaviors:
            raise ValidationError(f"behaviors.{name}", "deployed function has no behavior entry")
    return DeploymentSpec(deployments=deployments, behaviors=behaviors)


def encode_deployment_spec(dep: DeploymentSpec) -> bytes:
    return json.dumps(dep.to_json_dict(), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def validate_against_deployment(spec: WorkflowSpec, dep: DeploymentSpec) -> list[Violation]:
    """Check that every step's (function, target) pair is actually deployed.

    Violations are data, not failures; an empty list means the spec is
    routable as written.
    """
    violations: list[Violation] = []
    kinds = dep.node_kinds()
    for i, step in enumerate(spec.steps):
        targets = dep.deployments.get(step.function_name)
        if targets is None:
            violations.append(Violation(step=i, reason=UNKNOWN_FUNCTION,
                                        detail=step.function_name))
            continue
        if not any(t.address == step.target for t in targets):
            violations.append(Violation(
                step=i, reason=NOT_DEPLOYED,
                detail=f"{step.function_name} not deployed on {step.target}"))
            continue
        if step.mode == MODE_SYNC and kinds.get(step.target) == KIND_OPAQUE:
            violations.append(Violation(
                step=i, reason=SYNC_ON_OPAQUE,
                detail=f"{step.target} is opaque; SYNC unsupported"))
    return violations
