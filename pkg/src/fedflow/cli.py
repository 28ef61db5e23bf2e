"""Command-line entry points for the testbed services and tools."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import bench as bench_mod
from . import deployer as deployer_mod
from .client import WorkflowClient, write_records_csv
from .harness import _split_address
from .netsim import RegionProfile
from .node import FaasNode, NodeConfig, NodeServer
from .specs import parse_deployment_spec, parse_workflow_spec
from .store import ObjectStore, StoreClient, StoreServer

log = logging.getLogger(__name__)


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _serve_forever(server, what: str) -> int:
    print(f"{what} listening on {server.address}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        print("shutting down", flush=True)
        server.stop()
    return 0


def cmd_store(args) -> int:
    profile = RegionProfile.load(args.regions, time_scale=args.time_scale)
    engine = ObjectStore(profile, max_object_bytes=args.max_object_mib * 1024 * 1024,
                         persist_dir=args.persist)
    host, port = _split_address(args.listen)
    server = StoreServer(engine, host=host, port=port).start()
    return _serve_forever(server, "object store")


def cmd_node(args) -> int:
    profile = RegionProfile.load(args.regions, time_scale=args.time_scale)
    config = NodeConfig.for_kind(
        args.kind, args.region, cold_start_ms=args.cold_start_ms,
        warm_ttl_ms=args.warm_ttl_ms, max_instances_per_function=args.max_instances)
    engine = FaasNode(config, profile,
                      StoreClient(args.store, caller_region=args.region),
                      measurements_path=args.measurements)
    host, port = _split_address(args.listen)
    server = NodeServer(engine, host=host, port=port).start()
    return _serve_forever(server, f"{args.kind} node ({args.region})")


def cmd_deploy(args) -> int:
    dep = parse_deployment_spec(Path(args.spec).read_bytes())
    if args.regions:
        profile = RegionProfile.load(args.regions)
        for name, behavior in dep.behaviors.items():
            if behavior.data_dependency is not None:
                region = behavior.data_dependency[0].store_region
                if not profile.has_region(region):
                    print(f"warning: {name} depends on unknown region {region}",
                          file=sys.stderr)
    report = deployer_mod.deploy_all(dep)
    print(json.dumps(report.to_json_dict(), indent=2))
    return 0 if report.ok else 1


def cmd_undeploy(args) -> int:
    if args.nodes:
        addresses = args.nodes.split(",")
    else:
        dep = parse_deployment_spec(Path(args.spec).read_bytes())
        addresses = dep.node_addresses()
    report = deployer_mod.undeploy(args.function, addresses)
    print(json.dumps(report.to_json_dict(), indent=2))
    return 0 if report.ok else 1


def cmd_invoke(args) -> int:
    profile = RegionProfile.load(args.regions, time_scale=args.time_scale)
    spec = parse_workflow_spec(Path(args.spec).read_bytes())
    payload = Path(args.input).read_bytes() if args.input else b""
    client = WorkflowClient(profile, args.region, args.store)
    record = client.invoke_once(spec, payload, timeout_ms=args.timeout_ms)
    print(json.dumps({
        "execution_id": record.execution_id,
        "total_ms": round(record.total_ms, 3),
        "total_sim_ms": round(record.total_ms / profile.time_scale, 3),
        "status": record.status,
    }, indent=2))
    return 0 if record.status == "ok" else 1


def cmd_load(args) -> int:
    profile = RegionProfile.load(args.regions, time_scale=args.time_scale)
    spec = parse_workflow_spec(Path(args.spec).read_bytes())
    payload = Path(args.input).read_bytes() if args.input else b""
    client = WorkflowClient(profile, args.region, args.store)
    records = client.run_load(spec, payload, args.rate, args.duration)
    write_records_csv(records, args.out)
    ok = [r for r in records if r.status == "ok"]
    print(f"{len(records)} runs, {len(records) - len(ok)} failed, written to {args.out}")
    return 0


def cmd_bench_run(args) -> int:
    time_scale = bench_mod.PAPER_TIME_SCALE if args.paper_scale else args.time_scale
    scenario = bench_mod.load_scenario(args.scenario, time_scale=time_scale)
    duration = bench_mod.PAPER_DURATION_S if args.paper_scale else args.duration
    report = bench_mod.run_experiment(scenario, out_dir=args.out, duration_s=duration,
                                      auto_ports=not args.fixed_ports)
    print(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedflow",
        description="Federated serverless workflow testbed with data pre-fetching")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("store", help="run an object store service")
    p.add_argument("--listen", default="127.0.0.1:7100")
    p.add_argument("--regions", required=True, help="region profile JSON")
    p.add_argument("--time-scale", type=float, default=None)
    p.add_argument("--persist", default=None, help="directory-backed persistence")
    p.add_argument("--max-object-mib", type=int, default=64)
    p.set_defaults(func=cmd_store)

    p = sub.add_parser("node", help="run a FaaS node service")
    p.add_argument("--listen", default="127.0.0.1:7101")
    p.add_argument("--kind", choices=["native", "opaque"], required=True)
    p.add_argument("--region", required=True)
    p.add_argument("--cold-start-ms", type=int, default=None)
    p.add_argument("--warm-ttl-ms", type=int, default=600_000)
    p.add_argument("--max-instances", type=int, default=16)
    p.add_argument("--regions", required=True)
    p.add_argument("--time-scale", type=float, default=None)
    p.add_argument("--store", required=True, help="object store base URL")
    p.add_argument("--measurements", default=None, help="append measurements NDJSON here")
    p.set_defaults(func=cmd_node)

    p = sub.add_parser("deploy", help="push all function packages to their nodes")
    p.add_argument("--spec", required=True, help="deployment spec JSON")
    p.add_argument("--regions", default=None, help="region profile JSON (sanity checks)")
    p.set_defaults(func=cmd_deploy)

    p = sub.add_parser("undeploy", help="remove a function from nodes")
    p.add_argument("--function", required=True)
    p.add_argument("--spec", default=None, help="deployment spec JSON (node list source)")
    p.add_argument("--nodes", default=None, help="comma-separated node addresses")
    p.set_defaults(func=cmd_undeploy)

    p = sub.add_parser("invoke", help="start one workflow and wait for completion")
    p.add_argument("--spec", required=True, help="workflow spec JSON")
    p.add_argument("--input", default=None, help="input payload file")
    p.add_argument("--region", required=True, help="client region")
    p.add_argument("--regions", required=True)
    p.add_argument("--time-scale", type=float, default=None)
    p.add_argument("--store", required=True)
    p.add_argument("--timeout-ms", type=float, default=120_000)
    p.set_defaults(func=cmd_invoke)

    p = sub.add_parser("load", help="open-loop load run, records written as CSV")
    p.add_argument("--spec", required=True)
    p.add_argument("--input", default=None)
    p.add_argument("--region", required=True)
    p.add_argument("--regions", required=True)
    p.add_argument("--time-scale", type=float, default=None)
    p.add_argument("--store", required=True)
    p.add_argument("--rate", type=float, default=1.0, help="requests per simulated second")
    p.add_argument("--duration", type=float, default=1800.0, help="simulated seconds")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_load)

    p = sub.add_parser("bench", help="experiment harness")
    bench_sub = p.add_subparsers(dest="bench_command", required=True)
    run = bench_sub.add_parser("run", help="run one scenario (both variants)")
    run.add_argument("--scenario", required=True)
    run.add_argument("--out", default=None, help="report directory")
    run.add_argument("--paper-scale", action="store_true",
                     help="time_scale 1.0 and 30-minute load runs")
    run.add_argument("--duration", type=float, default=None,
                     help="override load duration (simulated seconds)")
    run.add_argument("--time-scale", type=float, default=None,
                     help="override the profile's time_scale")
    run.add_argument("--fixed-ports", action="store_true",
                     help="bind the addresses declared in the scenario")
    run.set_defaults(func=cmd_bench_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
