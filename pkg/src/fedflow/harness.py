"""Launches a whole testbed (store + nodes) inside one process.

Services still talk over loopback HTTP, so the network path is the real one;
only process boundaries are collapsed. With ``auto_ports=True`` every service
binds an ephemeral port and declared addresses are rewritten in workflows and
deployment specs, which keeps fixture files port-stable and test runs
collision-free.
"""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass, field, replace

from .netsim import RegionProfile
from .node import FaasNode, NodeConfig, NodeServer
from .specs import DeploymentSpec, DeploymentTarget, StepSpec, WorkflowSpec
from .store import ObjectStore, StoreClient, StoreServer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NodeDecl:
    """One node process declared by a scenario."""

    name: str
    address: str
    kind: str
    region: str
    cold_start_ms: int
    warm_ttl_ms: int = 600_000
    max_instances: int = 16

    def config(self) -> NodeConfig:
        return NodeConfig(kind=self.kind, region=self.region,
                          cold_start_ms=self.cold_start_ms,
                          warm_ttl_ms=self.warm_ttl_ms,
                          max_instances_per_function=self.max_instances)


@dataclass(frozen=True)
class ObjectDecl:
    region: str
    key: str
    size_bytes: int


def fixture_bytes(key: str, size: int) -> bytes:
    """Deterministic filler content for a fixture object."""
    seed = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big")
    return random.Random(seed).randbytes(size)


def _split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host, int(port)


class Testbed:
    """A running store plus nodes; use as a context manager."""

    __test__ = False  # not a test class, despite the name

    def __init__(self, profile: RegionProfile, nodes: list[NodeDecl],
                 store_address: str = "127.0.0.1:0", auto_ports: bool = False):
        self.profile = profile
        self.address_map: dict[str, str] = {}
        self.nodes: dict[str, FaasNode] = {}
        self._servers: list = []

        store_host, store_port = _split_address(store_address)
        self.store_engine = ObjectStore(profile)
        store_server = StoreServer(self.store_engine, host=store_host,
                                   port=0 if auto_ports else store_port)
        store_server.start()
        self._servers.append(store_server)
        self.store_url = store_server.url
        self.address_map[store_address] = store_server.address

        for decl in nodes:
            host, port = _split_address(decl.address)
            engine = FaasNode(decl.config(), profile,
                              StoreClient(self.store_url, caller_region=decl.region),
                              name=decl.name)
            server = NodeServer(engine, host=host, port=0 if auto_ports else port)
            server.start()
            self._servers.append(server)
            self.nodes[decl.name] = engine
            self.address_map[decl.address] = server.address
        log.info("testbed up: store %s, nodes %s", self.store_url,
                 {n: s.address for n, s in zip(self.nodes, self._servers[1:])})

    # -- address remapping -------------------------------------------------

    def actual(self, declared_address: str) -> str:
        return self.address_map.get(declared_address, declared_address)

    def remap_workflow(self, spec: WorkflowSpec) -> WorkflowSpec:
        steps = tuple(replace(s, target=self.actual(s.target)) for s in spec.steps)
        return replace(spec, steps=steps)

    def remap_deployment(self, dep: DeploymentSpec) -> DeploymentSpec:
        deployments = {
            name: tuple(replace(t, address=self.actual(t.address)) for t in targets)
            for name, targets in dep.deployments.items()
        }
        return replace(dep, deployments=deployments)

    # -- fixtures ------------------------------------------------------------

    def preload_objects(self, objects: list[ObjectDecl]) -> None:
        admin = StoreClient(self.store_url, caller_region=None)
        for obj in objects:
            admin.put(obj.region, obj.key, fixture_bytes(obj.key, obj.size_bytes))

    def admin_store(self) -> StoreClient:
        return StoreClient(self.store_url, caller_region=None)

    # -- lifecycle -------------------------------------------------------------

    def close(self) -> None:
        for server in self._servers:
            try:
                server.stop()
            except Exception:
                log.warning("server stop failed", exc_info=True)
        self._servers.clear()

    def __enter__(self) -> "Testbed":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
