"""Experiment harness: runs scenario variants, computes medians and CDFs, and
checks measurements against the analytic duration model.

A scenario bundles a region profile, a deployment, two (or more) workflow
variants that differ only in placement and pre-fetch flags, fixture objects,
and load parameters. Reported statistics are normalized back to simulated
milliseconds (wall / time_scale) so results are comparable across scales; the
median is the headline statistic.
"""

from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .client import RunRecord, WorkflowClient, write_records_csv
from .deployer import deploy_all
from .harness import NodeDecl, ObjectDecl, Testbed
from .netsim import RegionProfile
from .oracle import improvement_fraction, predict_workflow
from .specs import (
    DeploymentSpec,
    WorkflowSpec,
    parse_deployment_spec,
    parse_workflow_spec,
)

log = logging.getLogger(__name__)

DESK_TIME_SCALE = 0.25
DESK_DURATION_S = 300.0
PAPER_TIME_SCALE = 1.0
PAPER_DURATION_S = 1800.0


class EmptyInput(ValueError):
    """export_cdf got no records."""


class AssertionFailed(RuntimeError):
    """A scenario improvement assertion did not hold."""


class OracleMismatch(RuntimeError):
    """A measured median deviates from the model beyond tolerance."""


class ScenarioError(ValueError):
    """The scenario file is inconsistent."""


@dataclass(frozen=True)
class LoadParams:
    rate_per_s: float = 1.0
    duration_s: float = DESK_DURATION_S


@dataclass
class ScenarioConfig:
    """Parsed scenario plus everything needed to launch and judge it."""

    name: str
    profile: RegionProfile
    deployment: DeploymentSpec
    nodes: list[NodeDecl]
    store_address: str
    variants: dict[str, WorkflowSpec]
    baseline_variant: str
    optimized_variant: str
    client_region: str
    input_bytes: int
    objects: list[ObjectDecl] = field(default_factory=list)
    load: LoadParams = LoadParams()
    min_improvement: float | None = None
    oracle_tolerance_points: float = 5.0
    oracle_abs_ms: float = 50.0
    oracle_rel: float = 0.05

    def validate(self) -> None:
        for name in (self.baseline_variant, self.optimized_variant):
            if name not in self.variants:
                raise ScenarioError(f"variant {name!r} not defined")
        sequences = {
            name: [s.function_name for s in wf.steps] for name, wf in self.variants.items()
        }
        baseline_fns = sequences[self.baseline_variant]
        for name, fns in sequences.items():
            if fns != baseline_fns:
                raise ScenarioError(
                    f"variant {name!r} changes the function chain: {fns} != {baseline_fns}")
        addresses = {decl.address for decl in self.nodes}
        for name, wf in self.variants.items():
            for i, step in enumerate(wf.steps):
                if step.target not in addresses:
                    raise ScenarioError(
                        f"variant {name!r} step {i} targets undeclared node {step.target}")
                if step.function_name not in self.deployment.behaviors:
                    raise ScenarioError(
                        f"variant {name!r} step {i} uses unknown function {step.function_name}")

    def node_configs(self) -> dict[str, tuple[str, float]]:
        return {decl.address: (decl.kind, float(decl.cold_start_ms)) for decl in self.nodes}


def load_scenario(path: str | Path, time_scale: float | None = None) -> ScenarioConfig:
    """Read a scenario file, resolving referenced files relative to it."""
    path = Path(path)
    base = path.parent
    with open(path, "rb") as f:
        doc = json.load(f)
    profile = RegionProfile.load(base / doc["regions_file"], time_scale=time_scale)
    deployment = parse_deployment_spec((base / doc["deployment_file"]).read_bytes())
    variants = {
        name: parse_workflow_spec((base / rel).read_bytes())
        for name, rel in doc["variants"].items()
    }
    nodes = [NodeDecl(name=n["name"], address=n["address"], kind=n["kind"],
                      region=n["region"], cold_start_ms=int(n["cold_start_ms"]),
                      warm_ttl_ms=int(n.get("warm_ttl_ms", 600_000)),
                      max_instances=int(n.get("max_instances", 16)))
             for n in doc["nodes"]]
    objects = [ObjectDecl(region=o["region"], key=o["key"], size_bytes=int(o["size_bytes"]))
               for o in doc.get("objects", [])]
    load_doc = doc.get("load", {})
    assertions = doc.get("assertions", {})
    scenario = ScenarioConfig(
        name=doc.get("name", path.stem),
        profile=profile,
        deployment=deployment,
        nodes=nodes,
        store_address=doc.get("store_address", "127.0.0.1:0"),
        variants=variants,
        baseline_variant=doc["baseline_variant"],
        optimized_variant=doc["optimized_variant"],
        client_region=doc["client_region"],
        input_bytes=int(doc.get("input_bytes", 1024)),
        objects=objects,
        load=LoadParams(rate_per_s=float(load_doc.get("rate_per_s", 1.0)),
                        duration_s=float(load_doc.get("duration_s", DESK_DURATION_S))),
        min_improvement=(float(assertions["min_improvement"])
                         if "min_improvement" in assertions else None),
        oracle_tolerance_points=float(assertions.get("oracle_tolerance_points", 5.0)),
        oracle_abs_ms=float(assertions.get("oracle_abs_ms", 50.0)),
        oracle_rel=float(assertions.get("oracle_rel", 0.05)),
    )
    scenario.validate()
    return scenario


def predict_duration(scenario: ScenarioConfig, variant: str,
                     assume_warm: bool = True) -> float:
    """Predicted total duration (simulated ms) for one variant."""
    workflow = scenario.variants[variant]
    prediction = predict_workflow(
        scenario.profile, workflow, scenario.deployment, scenario.node_configs(),
        scenario.client_region, scenario.input_bytes, assume_warm=assume_warm)
    return prediction.total_ms


# ---------------------------------------------------------------------------
# statistics and CDF export


def sim_totals(records: list[RunRecord], time_scale: float) -> list[float]:
    """Successful runs only, normalized to simulated milliseconds."""
    return [r.total_ms / time_scale for r in records
            if r.status == "ok" and not math.isnan(r.total_ms)]


def export_cdf(totals_ms: list[float], path: str | Path) -> None:
    """Write sorted (total_ms, cumulative fraction) rows, truncated at p99."""
    if not totals_ms:
        raise EmptyInput("no records to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(totals_ms)
    n = len(ordered)
    lines = ["total_ms,cum_fraction"]
    for i, value in enumerate(ordered):
        fraction = (i + 1) / n
        if fraction > 0.99:
            break
        lines.append(f"{value:.3f},{fraction:.6f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# experiment runner


@dataclass
class VariantResult:
    name: str
    records: list[RunRecord]
    median_sim_ms: float
    p99_sim_ms: float
    error_count: int
    predicted_ms: float

    @property
    def oracle_delta_ms(self) -> float:
        return self.median_sim_ms - self.predicted_ms

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "samples": len(self.records),
            "errors": self.error_count,
            "median_sim_ms": round(self.median_sim_ms, 3),
            "p99_sim_ms": round(self.p99_sim_ms, 3),
            "predicted_ms": round(self.predicted_ms, 3),
            "oracle_delta_ms": round(self.oracle_delta_ms, 3),
        }


@dataclass
class ExperimentReport:
    scenario: str
    time_scale: float
    baseline: VariantResult
    optimized: VariantResult
    improvement: float
    predicted_improvement: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_json_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "time_scale": self.time_scale,
            "variants": {
                self.baseline.name: self.baseline.to_json_dict(),
                self.optimized.name: self.optimized.to_json_dict(),
            },
            "improvement_pct": round(self.improvement * 100.0, 2),
            "predicted_improvement_pct": round(self.predicted_improvement * 100.0, 2),
            "passed": self.passed,
            "failures": self.failures,
        }

    def raise_for_failures(self) -> None:
        for failure in self.failures:
            if failure.startswith("oracle"):
                raise OracleMismatch(failure)
        if self.failures:
            raise AssertionFailed("; ".join(self.failures))


def _percentile(ordered: list[float], q: float) -> float:
    if not ordered:
        return float("nan")
    index = min(len(ordered) - 1, max(0, math.ceil(q * len(ordered)) - 1))
    return ordered[index]


def run_variant(scenario: ScenarioConfig, testbed: Testbed, variant: str,
                duration_s: float | None = None) -> list[RunRecord]:
    workflow = testbed.remap_workflow(scenario.variants[variant])
    client = WorkflowClient(scenario.profile, scenario.client_region, testbed.store_url)
    input_bytes = bytes(scenario.input_bytes)
    return client.run_load(workflow, input_bytes, scenario.load.rate_per_s,
                           duration_s if duration_s is not None else scenario.load.duration_s)


def run_experiment(scenario: ScenarioConfig, out_dir: str | Path | None = None,
                   duration_s: float | None = None,
                   auto_ports: bool = True) -> ExperimentReport:
    """Run baseline and optimized variants, compare medians to the model."""
    ts = scenario.profile.time_scale
    out = Path(out_dir) if out_dir is not None else None
    results: dict[str, VariantResult] = {}
    with Testbed(scenario.profile, scenario.nodes, store_address=scenario.store_address,
                 auto_ports=auto_ports) as testbed:
        testbed.preload_objects(scenario.objects)
        report = deploy_all(testbed.remap_deployment(scenario.deployment))
        if not report.ok:
            raise RuntimeError(f"deployment failed: {report.to_json_dict()}")
        for variant in (scenario.baseline_variant, scenario.optimized_variant):
            log.info("scenario %s: running variant %s", scenario.name, variant)
            records = run_variant(scenario, testbed, variant, duration_s=duration_s)
            totals = sim_totals(records, ts)
            if not totals:
                raise RuntimeError(f"variant {variant} produced no successful runs")
            ordered = sorted(totals)
            results[variant] = VariantResult(
                name=variant,
                records=records,
                median_sim_ms=statistics.median(ordered),
                p99_sim_ms=_percentile(ordered, 0.99),
                error_count=sum(1 for r in records if r.status != "ok"),
                predicted_ms=predict_duration(scenario, variant))
            if out is not None:
                write_records_csv(records, out / f"{variant}.csv")
                export_cdf(totals, out / f"cdf_{variant}.csv")

    baseline = results[scenario.baseline_variant]
    optimized = results[scenario.optimized_variant]
    improvement = improvement_fraction(baseline.median_sim_ms, optimized.median_sim_ms)
    predicted = improvement_fraction(baseline.predicted_ms, optimized.predicted_ms)

    failures: list[str] = []
    for result in (baseline, optimized):
        tolerance = max(scenario.oracle_abs_ms, scenario.oracle_rel * result.predicted_ms)
        if abs(result.oracle_delta_ms) > tolerance:
            failures.append(
                f"oracle mismatch on {result.name}: median {result.median_sim_ms:.1f} ms "
                f"vs predicted {result.predicted_ms:.1f} ms (tolerance {tolerance:.1f})")
    delta_points = abs(improvement - predicted) * 100.0
    if delta_points > scenario.oracle_tolerance_points:
        failures.append(
            f"improvement {improvement * 100:.2f}% deviates {delta_points:.2f} points "
            f"from predicted {predicted * 100:.2f}%")
    if scenario.min_improvement is not None and improvement < scenario.min_improvement:
        failures.append(
            f"improvement {improvement * 100:.2f}% below required "
            f"{scenario.min_improvement * 100:.2f}%")

    experiment = ExperimentReport(
        scenario=scenario.name, time_scale=ts, baseline=baseline, optimized=optimized,
        improvement=improvement, predicted_improvement=predicted, failures=failures)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(
            json.dumps(experiment.to_json_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    return experiment
