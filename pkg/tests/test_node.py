import threading
import time

import pytest

from fedflow import _http
from fedflow.middleware import (
    PHASE_EXECUTE,
    PHASE_POKE,
    InvocationEnvelope,
    WrapperConfig,
)
from fedflow.netsim import now_ms, uniform_profile
from fedflow.node import FaasNode, InvalidPackage, NodeConfig
from fedflow.specs import FunctionBehavior, ObjectRef, StepSpec, WorkflowSpec
from fedflow.store import LocalStoreClient, ObjectStore


@pytest.fixture
def profile():
    return uniform_profile(["local"], latency_ms=0, bandwidth=1 << 32, time_scale=1.0)


@pytest.fixture
def store(profile):
    return ObjectStore(profile)


def make_node(profile, store, kind="native", cold=80, **cfg):
    node = FaasNode(NodeConfig.for_kind(kind, "local", cold_start_ms=cold, **cfg),
                    profile, LocalStoreClient(store, "local"))
    return node


def one_step_wf(address="127.0.0.1:1", function="fn", mode="ASYNC"):
    return WorkflowSpec("w", (StepSpec(function, address, "local", mode=mode),))


def exec_envelope(wf, eid="e1", step=0, payload=b"x"):
    return InvocationEnvelope(execution_id=eid, step_index=step, phase=PHASE_EXECUTE,
                              workflow=wf, input=payload)


def wait_until(predicate, timeout_s=5.0):
    deadline = time.perf_counter() + timeout_s
    while time.perf_counter() < deadline:
        if predicate():
            return True
        time.sleep(0.005)
    return False


class TestDeploy:
    def test_deploy_then_invoke(self, profile, store):
        node = make_node(profile, store)
        node.deploy("fn", FunctionBehavior(compute_ms=0, output_bytes=4))
        wf = one_step_wf(mode="SYNC")
        status, body = node.invoke(exec_envelope(wf))
        assert status == 200
        assert len(body) == 4
        node.close()

    def test_unknown_function_404(self, profile, store):
        node = make_node(profile, store)
        status, body = node.invoke(exec_envelope(one_step_wf()))
        assert status == 404
        assert body["error"] == "unknown_function"
        node.close()

    def test_dangling_dependency_region_rejected(self, profile, store):
        node = make_node(profile, store)
        with pytest.raises(InvalidPackage):
            node.deploy("fn", FunctionBehavior(
                compute_ms=0, output_bytes=0,
                data_dependency=(ObjectRef("atlantis", "k"), 1)))
        node.close()

    def test_undeploy_idempotent_and_913(self, profile, store):
        node = make_node(profile, store)
        node.deploy("fn", FunctionBehavior(compute_ms=0, output_bytes=0))
        assert node.undeploy("fn") is True
        assert node.undeploy("fn") is False
        status, _ = node.invoke(exec_envelope(one_step_wf()))
        assert status == 404
        node.close()

    def test_redeploy_swaps_behavior_for_next_invocation(self, profile, store):
        node = make_node(profile, store, cold=0)
        node.deploy("fn", FunctionBehavior(compute_ms=150, output_bytes=1))
        wf = one_step_wf(mode="SYNC")
        slow_done = {}

        def run_slow():
            t0 = time.perf_counter()
            node.invoke(exec_envelope(wf, eid="slow"))
            slow_done["ms"] = (time.perf_counter() - t0) * 1000

        t = threading.Thread(target=run_slow)
        t.start()
        time.sleep(0.03)  # in-flight under the old behavior
        node.deploy("fn", FunctionBehavior(compute_ms=0, output_bytes=1))
        t0 = time.perf_counter()
        node.invoke(exec_envelope(wf, eid="fast"))
        fast_ms = (time.perf_counter() - t0) * 1000
        t.join()
        assert slow_done["ms"] >= 150  # old compute finished untouched
        assert fast_ms < 100           # new behavior effective immediately after
        node.close()


class TestColdWarm:
    def test_first_invoke_pays_exactly_one_cold_start(self, profile, store):
        node = make_node(profile, store, cold=80)
        node.deploy("fn", FunctionBehavior(compute_ms=20, output_bytes=1))
        wf = one_step_wf(mode="SYNC")
        t0 = time.perf_counter()
        node.invoke(exec_envelope(wf, eid="cold"))
        cold_ms = (time.perf_counter() - t0) * 1000
        t0 = time.perf_counter()
        node.invoke(exec_envelope(wf, eid="warm"))
        warm_ms = (time.perf_counter() - t0) * 1000
        delta = cold_ms - warm_ms
        assert abs(delta - 80) <= max(20, 0.1 * 80)
        node.close()

    def test_reclaim_counts(self, profile, store):
        node = make_node(profile, store, cold=0, warm_ttl_ms=50)
        assert node.reclaim_idle() == 0
        node.deploy("fn", FunctionBehavior(compute_ms=0, output_bytes=0))
        node.invoke(exec_envelope(one_step_wf(mode="SYNC")))
        assert node.pool.instance_count("fn") == 1
        time.sleep(0.12)  # idle for > 2x ttl
        assert node.reclaim_idle() >= 0  # janitor may have swept already
        assert wait_until(lambda: node.pool.instance_count("fn") == 0)
        node.close()

    def test_busy_instance_never_reclaimed(self, profile, store):
        node = make_node(profile, store, cold=0, warm_ttl_ms=10)
        node.deploy("fn", FunctionBehavior(compute_ms=300, output_bytes=0))
        wf = one_step_wf()
        node.invoke(exec_envelope(wf))  # async: runs in background
        assert wait_until(lambda: node.pool.instance_count("fn") == 1)
        time.sleep(0.05)  # ttl long expired, but the instance is busy
        assert node.reclaim_idle() == 0
        assert node.pool.instance_count("fn") == 1
        node.close()


class TestSyncMode:
    def test_sync_on_opaque_rejected(self, profile, store):
        node = make_node(profile, store, kind="opaque")
        node.deploy("fn", FunctionBehavior(compute_ms=0, output_bytes=0))
        status, body = node.invoke(exec_envelope(one_step_wf(mode="SYNC")))
        assert status == 409
        assert body["error"] == "sync_unsupported"
        node.close()

    def test_sync_on_native_returns_output(self, profile, store):
        node = make_node(profile, store, cold=0)
        node.deploy("fn", FunctionBehavior(compute_ms=0, output_bytes=32))
        status, body = node.invoke(exec_envelope(one_step_wf(mode="SYNC")))
        assert status == 200 and isinstance(body, bytes) and len(body) == 32
        node.close()


class TestExactlyOnce:
    def test_duplicate_executes_ignored(self, profile, store):
        node = make_node(profile, store, cold=0)
        node.deploy("fn", FunctionBehavior(compute_ms=0, output_bytes=1))
        wf = one_step_wf(mode="SYNC")
        env = exec_envelope(wf, eid="dup")
        assert node.invoke(env)[0] == 200
        status, body = node.invoke(env)
        assert status == 202 and body["status"] == "duplicate_ignored"
        assert node.handler_runs("dup", 0) == 1
        node.close()

    def test_native_poke_never_runs_handler(self, profile, store):
        store.put("local", "data/d", b"z" * 64)
        node = make_node(profile, store, cold=0)
        node.deploy("fn", FunctionBehavior(
            compute_ms=0, output_bytes=1,
            data_dependency=(ObjectRef("local", "data/d"), 64)))
        wf = WorkflowSpec("w", (
            StepSpec("fn", "127.0.0.1:1", "local",
                     prefetch=(ObjectRef("local", "data/d"),)),))
        poke = InvocationEnvelope(execution_id="p1", step_index=0, phase=PHASE_POKE,
                                  workflow=wf)
        status, _ = node.invoke(poke)
        assert status == 202
        assert wait_until(lambda: node.take_prefetch_slot("p1", 0) is not None
                          or node._slots == {})
        assert node.handler_runs("p1", 0) == 0
        node.close()

    def test_duplicate_pokes_create_one_slot(self, profile, store):
        node = make_node(profile, store, cold=0)
        node.deploy("fn", FunctionBehavior(compute_ms=0, output_bytes=1))
        wf = WorkflowSpec("w", (
            StepSpec("fn", "127.0.0.1:1", "local",
                     prefetch=(ObjectRef("local", "nope"),)),))
        poke = InvocationEnvelope(execution_id="pp", step_index=0, phase=PHASE_POKE,
                                  workflow=wf)
        node.invoke(poke)
        node.invoke(poke)
        with node._state_lock:
            assert len([k for k in node._slots if k[0] == "pp"]) == 1
        node.close()


class TestQueueing:
    def test_fifo_completion_order_with_pool_of_one(self, profile, store):
        node = make_node(profile, store, cold=0, max_instances_per_function=1)
        node.deploy("fn", FunctionBehavior(compute_ms=30, output_bytes=1))
        wf = one_step_wf(mode="SYNC")
        order = []
        lock = threading.Lock()

        def call(i):
            node.invoke(exec_envelope(wf, eid=f"q{i}"))
            with lock:
                order.append(i)

        threads = []
        for i in range(5):
            t = threading.Thread(target=call, args=(i,))
            t.start()
            time.sleep(0.012)  # stagger admissions
            threads.append(t)
        for t in threads:
            t.join()
        assert order == [0, 1, 2, 3, 4]
        node.close()

    def test_capacity_exceeded_when_queue_bound_hit(self, profile, store):
        node = make_node(profile, store, cold=0, max_instances_per_function=1,
                         queue_bound=1)
        node.deploy("fn", FunctionBehavior(compute_ms=200, output_bytes=0))
        wf = one_step_wf()
        node.invoke(exec_envelope(wf, eid="r1"))  # occupies the instance
        assert wait_until(lambda: node.pool.instance_count("fn") == 1)
        time.sleep(0.02)
        from fedflow.node import CapacityExceeded
        t = threading.Thread(target=node.pool.acquire, args=("fn",), daemon=True)
        t.start()  # fills the queue slot
        time.sleep(0.02)
        with pytest.raises(CapacityExceeded):
            node.pool.acquire("fn")
        node.close()


class TestHttpSurface:
    def test_admin_and_invoke_round_trip(self, local_bed):
        bed = local_bed
        nat = bed.nodes["nat"]
        address = bed.actual("127.0.0.1:7901")
        resp = _http.post_json(f"http://{address}/admin/deploy", {
            "function_name": "fn",
            "behavior": {"compute_ms": 0, "output_bytes": 8, "data_dependency": None},
            "wrapper_config": {},
        })
        assert resp.status == 200
        wf = one_step_wf(address=address, mode="SYNC")
        env = exec_envelope(wf)
        resp = _http.post(f"http://{address}/fn/fn", body=env.to_bytes())
        assert resp.status == 200 and len(resp.body) == 8
        # healthz reports the platform kind used for pass routing
        health = _http.get(f"http://{address}/healthz").json()
        assert health["kind"] == "native"
        # metrics exposes one measurement line
        lines = _http.get(f"http://{address}/metrics").body.decode().strip().splitlines()
        assert len(lines) == 1
        assert nat.handler_runs(env.execution_id, 0) == 1

    def test_envelope_function_mismatch_rejected(self, local_bed):
        address = local_bed.actual("127.0.0.1:7901")
        wf = one_step_wf(address=address)
        env = exec_envelope(wf)
        resp = _http.post(f"http://{address}/fn/other", body=env.to_bytes())
        assert resp.status == 400

    def test_invalid_envelope_rejected(self, local_bed):
        address = local_bed.actual("127.0.0.1:7901")
        resp = _http.post(f"http://{address}/fn/fn", body=b'{"bogus": 1}')
        assert resp.status == 400
