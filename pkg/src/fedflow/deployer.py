"""Deployer: pushes function packages (behavior + wrapper config) to nodes.

A thin admin-API client. The same package deploys unmodified to native and
opaque nodes; deploys to distinct nodes run concurrently and rerunning
converges to the same node state (idempotent).
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import _http
from .middleware import WrapperConfig
from .specs import DeploymentSpec, FunctionBehavior

log = logging.getLogger(__name__)

STATUS_DEPLOYED = "deployed"
STATUS_REMOVED = "removed"
STATUS_FAILED = "failed"


@dataclass(frozen=True)
class FunctionPackage:
    """Deployable unit: synthetic behavior plus wrapper configuration."""

    function_name: str
    behavior: FunctionBehavior
    wrapper_config: WrapperConfig = WrapperConfig()

    def to_json_dict(self) -> dict:
        return {
            "behavior": self.behavior.to_json_dict(),
            "function_name": self.function_name,
            "wrapper_config": self.wrapper_config.to_json_dict(),
        }


@dataclass
class DeployEntry:
    function: str
    address: str
    status: str
    error: str = ""

    def to_json_dict(self) -> dict:
        doc = {"function": self.function, "address": self.address, "status": self.status}
        if self.error:
            doc["error"] = self.error
        return doc


@dataclass
class DeployReport:
    entries: list[DeployEntry] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(e.status != STATUS_FAILED for e in self.entries)

    @property
    def failed(self) -> list[DeployEntry]:
        return [e for e in self.entries if e.status == STATUS_FAILED]

    def to_json_dict(self) -> dict:
        return {"ok": self.ok, "entries": [e.to_json_dict() for e in self.entries]}


def _deploy_one(address: str, package: FunctionPackage, timeout_s: float) -> DeployEntry:
    try:
        resp = _http.post_json(f"http://{address}/admin/deploy", package.to_json_dict(),
                               timeout_s=timeout_s)
    except OSError as exc:
        return DeployEntry(package.function_name, address, STATUS_FAILED, str(exc))
    if resp.status != 200:
        return DeployEntry(package.function_name, address, STATUS_FAILED,
                           f"HTTP {resp.status}: {resp.body[:200]!r}")
    return DeployEntry(package.function_name, address, STATUS_DEPLOYED)


def _undeploy_one(address: str, function: str, timeout_s: float) -> DeployEntry:
    try:
        resp = _http.delete(f"http://{address}/admin/functions/{function}",
                            timeout_s=timeout_s)
    except OSError as exc:
        return DeployEntry(function, address, STATUS_FAILED, str(exc))
    if resp.status != 200:
        return DeployEntry(function, address, STATUS_FAILED, f"HTTP {resp.status}")
    return DeployEntry(function, address, STATUS_REMOVED)


def build_packages(dep: DeploymentSpec,
                   wrapper_config: WrapperConfig | None = None) -> dict[str, FunctionPackage]:
    wcfg = wrapper_config or WrapperConfig()
    return {
        name: FunctionPackage(function_name=name, behavior=behavior, wrapper_config=wcfg)
        for name, behavior in dep.behaviors.items()
    }


def deploy_all(dep: DeploymentSpec, wrapper_config: WrapperConfig | None = None,
               timeout_s: float = 10.0) -> DeployReport:
    """Deploy every (function, node) pair in the spec; failures are per-pair."""
    packages = build_packages(dep, wrapper_config)
    # group by node so per-node pushes stay sequential while nodes run in parallel
    per_node: dict[str, list[FunctionPackage]] = {}
    for name, targets in dep.deployments.items():
        for target in targets:
            per_node.setdefault(target.address, []).append(packages[name])

    def _push_node(address: str) -> list[DeployEntry]:
        return [_deploy_one(address, pkg, timeout_s) for pkg in per_node[address]]

    report = DeployReport()
    if not per_node:
        return report
    with ThreadPoolExecutor(max_workers=min(16, len(per_node))) as pool:
        for entries in pool.map(_push_node, sorted(per_node)):
            report.entries.extend(entries)
    for entry in report.failed:
        log.warning("deploy failed: %s on %s (%s)", entry.function, entry.address, entry.error)
    return report


def undeploy(function: str, addresses: list[str], timeout_s: float = 10.0) -> DeployReport:
    """Remove the function from the listed nodes; idempotent."""
    report = DeployReport()
    if not addresses:
        return report
    with ThreadPoolExecutor(max_workers=min(16, len(addresses))) as pool:
        report.entries.extend(
            pool.map(lambda addr: _undeploy_one(addr, function, timeout_s), addresses))
    return report


def node_functions(address: str, timeout_s: float = 10.0) -> dict:
    """Admin listing used to verify deploy idempotence."""
    resp = _http.get(f"http://{address}/admin/functions", timeout_s=timeout_s)
    if resp.status != 200:
        raise RuntimeError(f"admin listing failed: HTTP {resp.status}")
    return json.loads(resp.body.decode("utf-8"))["functions"]
