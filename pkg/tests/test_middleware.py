import base64
import json
import time

import pytest

from fedflow.client import WorkflowClient
from fedflow.deployer import deploy_all
from fedflow.harness import NodeDecl, Testbed
from fedflow.middleware import (
    PHASE_EXECUTE,
    PHASE_POKE,
    EnvelopeError,
    InvocationEnvelope,
    deterministic_output,
    exec_done_key,
    exec_input_key,
)
from fedflow.netsim import RegionProfile, uniform_profile
from fedflow.node import FaasNode, NodeConfig
from fedflow.specs import (
    DeploymentSpec,
    DeploymentTarget,
    FunctionBehavior,
    ObjectRef,
    StepSpec,
    WorkflowSpec,
)
from fedflow.store import LocalStoreClient, ObjectStore


def edge_profile(time_scale=0.1):
    # two-step co-located fixture shape: 256 KiB at 327680 B/s downloads in 800 ms
    return RegionProfile(
        regions=("client", "edge"),
        latency_ms=((0.0, 0.0), (0.0, 0.0)),
        bandwidth={(a, b): 327_680 for a in ("client", "edge") for b in ("client", "edge")},
        time_scale=time_scale,
    )


def deploy_pair(bed, with_dep=True):
    dep = DeploymentSpec(
        deployments={
            "fn_a": (DeploymentTarget(bed.actual("127.0.0.1:7911"), "edge", "native"),),
            "fn_b": (DeploymentTarget(bed.actual("127.0.0.1:7911"), "edge", "native"),),
        },
        behaviors={
            "fn_a": FunctionBehavior(compute_ms=5000, output_bytes=1024),
            "fn_b": FunctionBehavior(
                compute_ms=70, output_bytes=64,
                data_dependency=(ObjectRef("edge", "data/dep.bin"), 262_144)
                if with_dep else None),
        })
    assert deploy_all(dep).ok
    return dep


def pair_workflow(bed, prefetch):
    address = bed.actual("127.0.0.1:7911")
    refs = (ObjectRef("edge", "data/dep.bin"),) if prefetch else ()
    return WorkflowSpec("pair", (
        StepSpec("fn_a", address, "edge"),
        StepSpec("fn_b", address, "edge", prefetch=refs),
    ))


@pytest.fixture
def edge_bed():
    profile = edge_profile()
    decls = [NodeDecl(name="edge", address="127.0.0.1:7911", kind="native",
                      region="edge", cold_start_ms=150)]
    with Testbed(profile, decls, auto_ports=True) as bed:
        bed.admin_store().put("edge", "data/dep.bin", bytes(262_144))
        yield profile, bed


class TestChainTiming:
    def test_two_step_baseline_and_prefetch_medians(self, edge_bed):
        """Sequential chain ~5870 sim ms; with pre-fetch the 800 ms download
        overlaps the 5000 ms compute, leaving ~5070 sim ms."""
        profile, bed = edge_bed
        deploy_pair(bed)
        client = WorkflowClient(profile, "client", bed.store_url)
        ts = profile.time_scale
        baseline_wf = pair_workflow(bed, prefetch=False)
        prefetch_wf = pair_workflow(bed, prefetch=True)
        client.invoke_once(baseline_wf, b"in", timeout_ms=60_000)  # warm both steps
        base = [client.invoke_once(baseline_wf, b"in", timeout_ms=60_000).total_ms / ts
                for _ in range(3)]
        pre = [client.invoke_once(prefetch_wf, b"in", timeout_ms=60_000).total_ms / ts
               for _ in range(3)]
        base_med, pre_med = sorted(base)[1], sorted(pre)[1]
        assert base_med == pytest.approx(5870, rel=0.05)
        assert pre_med == pytest.approx(5070, rel=0.05)
        assert pre_med < base_med

    def test_single_step_writes_terminal_and_sends_no_poke(self, edge_bed):
        profile, bed = edge_bed
        deploy_pair(bed)
        address = bed.actual("127.0.0.1:7911")
        wf = WorkflowSpec("solo", (StepSpec("fn_b", address, "edge"),))
        client = WorkflowClient(profile, "client", bed.store_url)
        record = client.invoke_once(wf, b"in", timeout_ms=60_000)
        assert record.status == "ok"
        node = bed.nodes["edge"]
        m = [x for x in node.measurements() if x["execution_id"] == record.execution_id]
        assert len(m) == 1
        assert "prefetch_poke_sent" not in m[0]
        raw = bed.admin_store().get("edge", exec_done_key(record.execution_id))
        assert json.loads(raw)["status"] == "ok"


class TestResolveInput:
    def test_inline_input_returned_unchanged(self):
        profile = uniform_profile(["r"], time_scale=1.0)
        store = ObjectStore(profile)
        node = FaasNode(NodeConfig.for_kind("native", "r", cold_start_ms=0),
                        profile, LocalStoreClient(store, "r"))
        node.deploy("fn", FunctionBehavior(compute_ms=0, output_bytes=0))
        wf = WorkflowSpec("w", (StepSpec("fn", "127.0.0.1:1", "r"),))
        env = InvocationEnvelope(execution_id="e", step_index=0, phase=PHASE_EXECUTE,
                                 workflow=wf, input=b"inline-payload")
        from fedflow.middleware import resolve_input
        assert resolve_input(env, node) == b"inline-payload"
        node.close()

    def test_ref_input_polled_from_store(self):
        profile = uniform_profile(["r"], time_scale=1.0)
        store = ObjectStore(profile)
        node = FaasNode(NodeConfig.for_kind("opaque", "r", cold_start_ms=0),
                        profile, LocalStoreClient(store, "r"))
        node.deploy("fn", FunctionBehavior(compute_ms=0, output_bytes=0))
        wf = WorkflowSpec("w", (StepSpec("x", "127.0.0.1:1", "r"),
                                StepSpec("fn", "127.0.0.1:1", "r")))
        key = exec_input_key("e", 1)
        env = InvocationEnvelope(execution_id="e", step_index=1, phase=PHASE_EXECUTE,
                                 workflow=wf, input_ref=ObjectRef("r", key))
        from fedflow.middleware import resolve_input
        store.put("r", key, b"buffered")
        assert resolve_input(env, node) == b"buffered"
        # and a late write is picked up within the poll budget
        import threading
        key2 = exec_input_key("e2", 1)
        env2 = InvocationEnvelope(execution_id="e2", step_index=1, phase=PHASE_EXECUTE,
                                  workflow=wf, input_ref=ObjectRef("r", key2))
        threading.Timer(0.1, lambda: store.put("r", key2, b"late")).start()
        t0 = time.perf_counter()
        assert resolve_input(env2, node) == b"late"
        assert (time.perf_counter() - t0) < 0.5
        node.close()


class TestPokeRouting:
    def test_poke_to_native_creates_slot(self, edge_bed):
        profile, bed = edge_bed
        deploy_pair(bed)
        wf = pair_workflow(bed, prefetch=True)
        node = bed.nodes["edge"]
        poke = InvocationEnvelope(execution_id="pk", step_index=1, phase=PHASE_POKE,
                                  workflow=wf)
        status, _ = node.invoke(poke)
        assert status == 202
        deadline = time.perf_counter() + 2
        slot = None
        while slot is None and time.perf_counter() < deadline:
            with node._state_lock:
                slot = node._slots.get(("pk", 1))
            time.sleep(0.01)
        assert slot is not None
        slot.wait_until_ready(timeout_s=5)
        assert slot.error is None
        assert node.handler_runs("pk", 1) == 0

    def test_dropped_poke_degrades_to_baseline_not_failure(self, edge_bed):
        profile, bed = edge_bed
        deploy_pair(bed)
        node = bed.nodes["edge"]
        node.poke_fault_hook = lambda env: True  # drop every poke
        try:
            client = WorkflowClient(profile, "client", bed.store_url)
            wf = pair_workflow(bed, prefetch=True)
            client.invoke_once(wf, b"in", timeout_ms=60_000)  # warm
            record = client.invoke_once(wf, b"in", timeout_ms=60_000)
            assert record.status == "ok"
            # without the poke the download lands on the critical path
            assert record.total_ms / profile.time_scale == pytest.approx(5870, rel=0.05)
        finally:
            node.poke_fault_hook = None


class TestDeterministicOutputs:
    def test_output_depends_only_on_execution_and_step(self):
        a = deterministic_output("e1", 0, 512)
        assert a == deterministic_output("e1", 0, 512)
        assert a != deterministic_output("e1", 1, 512)
        assert a != deterministic_output("e2", 0, 512)

    def test_placement_invariance_across_two_nodes(self):
        """The same execution id routed to two different placements produces
        byte-identical intermediate and final outputs. Each placement runs in
        its own testbed so the reused id cannot collide in one store."""
        profile = uniform_profile(["r"], latency_ms=0, bandwidth=1 << 30, time_scale=1.0)
        behaviors = {
            "fa": FunctionBehavior(compute_ms=0, output_bytes=256),
            "fb": FunctionBehavior(compute_ms=0, output_bytes=128),
        }
        outputs = []
        for declared in ("127.0.0.1:7921", "127.0.0.1:7922"):
            decls = [NodeDecl(name="n", address=declared, kind="opaque", region="r",
                              cold_start_ms=0)]
            with Testbed(profile, decls, auto_ports=True) as bed:
                address = bed.actual(declared)
                dep = DeploymentSpec(
                    deployments={f: (DeploymentTarget(address, "r", "opaque"),)
                                 for f in behaviors},
                    behaviors=behaviors)
                assert deploy_all(dep).ok
                wf = WorkflowSpec("w", (StepSpec("fa", address, "r"),
                                        StepSpec("fb", address, "r")))
                client = WorkflowClient(profile, "r", bed.store_url)
                record = client.invoke_once(wf, b"in", timeout_ms=30_000,
                                            execution_id="fixed-eid")
                assert record.status == "ok"
                intermediate = bed.admin_store().get("r", exec_input_key("fixed-eid", 1))
                outputs.append((intermediate, base64.b64decode(record.final_output_b64)))
        assert outputs[0] == outputs[1]


class TestRecomposition:
    def test_per_request_rerouting_without_redeploy(self):
        profile = RegionProfile(
            regions=("client", "east", "west"),
            latency_ms=((0.0, 1.0, 1.0), (1.0, 0.0, 1.0), (1.0, 1.0, 0.0)),
            bandwidth={(a, b): 1 << 30 for a in ("client", "east", "west")
                       for b in ("client", "east", "west")},
            time_scale=1.0)
        decls = [
            NodeDecl(name="east", address="127.0.0.1:7931", kind="opaque",
                     region="east", cold_start_ms=0),
            NodeDecl(name="west", address="127.0.0.1:7932", kind="opaque",
                     region="west", cold_start_ms=0),
        ]
        with Testbed(profile, decls, auto_ports=True) as bed:
            east, west = bed.actual("127.0.0.1:7931"), bed.actual("127.0.0.1:7932")
            dep = DeploymentSpec(
                deployments={"fn": (DeploymentTarget(east, "east", "opaque"),
                                    DeploymentTarget(west, "west", "opaque"))},
                behaviors={"fn": FunctionBehavior(compute_ms=0, output_bytes=16)})
            assert deploy_all(dep).ok
            client = WorkflowClient(profile, "client", bed.store_url)
            r1 = client.invoke_once(
                WorkflowSpec("w1", (StepSpec("fn", east, "east"),)), b"x",
                timeout_ms=10_000)
            r2 = client.invoke_once(
                WorkflowSpec("w2", (StepSpec("fn", west, "west"),)), b"x",
                timeout_ms=10_000)
            assert r1.status == r2.status == "ok"
            regions = {
                m["execution_id"]: m["node_region"]
                for node in bed.nodes.values()
                for m in node.measurements()
            }
            assert regions[r1.execution_id] == "east"
            assert regions[r2.execution_id] == "west"


class TestEnvelopeInvariants:
    def wf(self):
        return WorkflowSpec("w", (StepSpec("a", "h:1", "r"), StepSpec("b", "h:1", "r")))

    def test_poke_with_input_rejected(self):
        env = InvocationEnvelope(execution_id="e", step_index=1, phase=PHASE_POKE,
                                 workflow=self.wf(), input=b"x")
        with pytest.raises(EnvelopeError):
            env.validate()

    def test_execute_with_both_channels_rejected(self):
        env = InvocationEnvelope(execution_id="e", step_index=1, phase=PHASE_EXECUTE,
                                 workflow=self.wf(), input=b"x",
                                 input_ref=ObjectRef("r", "k"))
        with pytest.raises(EnvelopeError):
            env.validate()

    def test_execute_with_neither_channel_rejected(self):
        env = InvocationEnvelope(execution_id="e", step_index=1, phase=PHASE_EXECUTE,
                                 workflow=self.wf())
        with pytest.raises(EnvelopeError):
            env.validate()

    def test_step_zero_requires_inline_input(self):
        env = InvocationEnvelope(execution_id="e", step_index=0, phase=PHASE_EXECUTE,
                                 workflow=self.wf(), input_ref=ObjectRef("r", "k"))
        with pytest.raises(EnvelopeError):
            env.validate()

    def test_step_index_out_of_range_rejected(self):
        env = InvocationEnvelope(execution_id="e", step_index=2, phase=PHASE_EXECUTE,
                                 workflow=self.wf(), input=b"x")
        with pytest.raises(EnvelopeError):
            env.validate()

    def test_envelope_json_round_trip(self):
        env = InvocationEnvelope(execution_id="e", step_index=1, phase=PHASE_EXECUTE,
                                 workflow=self.wf(), input_ref=ObjectRef("r", "k"))
        assert InvocationEnvelope.from_bytes(env.to_bytes()) == env
