"""fedflow: a federated serverless workflow testbed.

Decentralized choreography middleware with function pre-warming, data
pre-fetching, function shipping, and per-request workflow recomposition across
simulated geo-distributed FaaS nodes, validated against an analytic duration
model.
"""

__version__ = "0.1.0"

from .netsim import RegionProfile, UnknownRegion, sleep_for
from .specs import (
    DeploymentSpec,
    FunctionBehavior,
    ObjectRef,
    StepSpec,
    WorkflowSpec,
    encode_workflow_spec,
    parse_deployment_spec,
    parse_workflow_spec,
    validate_against_deployment,
)

__all__ = [
    "RegionProfile",
    "UnknownRegion",
    "sleep_for",
    "DeploymentSpec",
    "FunctionBehavior",
    "ObjectRef",
    "StepSpec",
    "WorkflowSpec",
    "encode_workflow_spec",
    "parse_deployment_spec",
    "parse_workflow_spec",
    "validate_against_deployment",
    "__version__",
]
