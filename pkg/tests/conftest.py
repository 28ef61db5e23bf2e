import logging

import pytest

from fedflow.harness import NodeDecl, Testbed
from fedflow.netsim import uniform_profile

logging.getLogger("fedflow").setLevel(logging.WARNING)


def make_testbed(profile, node_decls):
    return Testbed(profile, node_decls, auto_ports=True)


@pytest.fixture
def zero_profile():
    """Single region, zero latency, effectively infinite bandwidth."""
    return uniform_profile(["local"], latency_ms=0, bandwidth=1 << 32, time_scale=1.0)


@pytest.fixture
def local_bed(zero_profile):
    """One native and one opaque node in the same zero-latency region."""
    decls = [
        NodeDecl(name="nat", address="127.0.0.1:7901", kind="native", region="local",
                 cold_start_ms=60, warm_ttl_ms=600_000),
        NodeDecl(name="opq", address="127.0.0.1:7902", kind="opaque", region="local",
                 cold_start_ms=120, warm_ttl_ms=600_000),
    ]
    with make_testbed(zero_profile, decls) as bed:
        yield bed
