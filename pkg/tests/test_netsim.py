import math
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedflow.netsim import (
    ProfileError,
    RegionProfile,
    UnknownRegion,
    now_ms,
    sleep_for,
    uniform_profile,
)


def geo_profile(time_scale=1.0):
    return RegionProfile(
        regions=("eu", "us"),
        latency_ms=((0.0, 45.0), (45.0, 0.0)),
        bandwidth={("eu", "eu"): 1 << 20, ("eu", "us"): 327_680,
                   ("us", "eu"): 327_680, ("us", "us"): 1 << 20},
        time_scale=time_scale,
    )


class TestMessageDelay:
    def test_diagonal_is_zero(self):
        assert geo_profile().message_delay("eu", "eu") == 0

    def test_table_lookup(self):
        assert geo_profile().message_delay("eu", "us") == 45

    def test_time_scale_applies(self):
        assert geo_profile(0.1).message_delay("eu", "us") == pytest.approx(4.5)

    def test_unknown_region(self):
        with pytest.raises(UnknownRegion):
            geo_profile().message_delay("eu", "mars")


class TestTransferDelay:
    def test_zero_payload_is_message_delay_only(self):
        p = geo_profile()
        assert p.transfer_delay("eu", "us", 0) == 45

    def test_256kib_at_fixture_rate(self):
        # 262144 bytes / 327680 bytes/s = 0.8 s exactly
        p = geo_profile()
        p = RegionProfile(regions=p.regions, latency_ms=((0.0, 0.0), (0.0, 0.0)),
                          bandwidth=dict(p.bandwidth), time_scale=1.0)
        assert p.transfer_delay("eu", "us", 262_144) == 800

    def test_1mib_at_1mibps_with_latency(self):
        p = RegionProfile(
            regions=("a", "b"),
            latency_ms=((0.0, 50.0), (50.0, 0.0)),
            bandwidth={(x, y): 1 << 20 for x in ("a", "b") for y in ("a", "b")})
        assert p.transfer_delay("a", "b", 1 << 20) == 1050

    def test_rounds_up(self):
        p = uniform_profile(["r"], bandwidth=3000)
        assert p.transfer_delay("r", "r", 1) == 1  # 0.33 ms rounded up

    def test_negative_size_rejected(self):
        with pytest.raises(ValueError):
            geo_profile().transfer_delay("eu", "us", -1)


@given(size=st.integers(min_value=0, max_value=1 << 30),
       scale=st.floats(min_value=0.01, max_value=8.0, allow_nan=False))
@settings(max_examples=80, deadline=None)
def test_scale_linearity_before_rounding(size, scale):
    base = geo_profile(1.0)
    scaled = geo_profile(scale)
    exact_base = base.transfer_delay_exact("eu", "us", size)
    exact_scaled = scaled.transfer_delay_exact("eu", "us", size)
    assert exact_scaled == pytest.approx(scale * exact_base, rel=1e-12)


@given(a=st.integers(min_value=0, max_value=1 << 26),
       b=st.integers(min_value=0, max_value=1 << 26))
@settings(max_examples=60, deadline=None)
def test_transfer_monotone_in_size(a, b):
    p = geo_profile()
    lo, hi = sorted((a, b))
    assert p.transfer_delay("eu", "us", lo) <= p.transfer_delay("eu", "us", hi)


def test_delays_are_deterministic():
    p = geo_profile()
    assert [p.transfer_delay("eu", "us", 12345) for _ in range(5)] == \
        [p.transfer_delay("eu", "us", 12345)] * 5


class TestSleepFor:
    def test_zero_returns_immediately(self):
        t0 = time.perf_counter()
        sleep_for(0)
        assert (time.perf_counter() - t0) * 1000 < 5

    def test_100ms_within_jitter_bound(self):
        t0 = time.perf_counter()
        sleep_for(100)
        elapsed = (time.perf_counter() - t0) * 1000
        assert 100 <= elapsed <= 105

    def test_5s_within_jitter_bound(self):
        t0 = time.perf_counter()
        sleep_for(5000)
        elapsed = (time.perf_counter() - t0) * 1000
        assert 5000 <= elapsed <= 5010


class TestProfileValidation:
    def test_nonzero_diagonal_rejected(self):
        with pytest.raises(ProfileError):
            RegionProfile(regions=("a",), latency_ms=((1.0,),),
                          bandwidth={("a", "a"): 1.0})

    def test_negative_latency_rejected(self):
        with pytest.raises(ProfileError):
            RegionProfile(regions=("a", "b"),
                          latency_ms=((0.0, -1.0), (1.0, 0.0)),
                          bandwidth={(x, y): 1.0 for x in "ab" for y in "ab"})

    def test_missing_bandwidth_pair_rejected(self):
        with pytest.raises(ProfileError):
            RegionProfile(regions=("a", "b"),
                          latency_ms=((0.0, 1.0), (1.0, 0.0)),
                          bandwidth={("a", "a"): 1.0, ("b", "b"): 1.0})

    def test_bad_dimension_rejected(self):
        with pytest.raises(ProfileError):
            RegionProfile(regions=("a", "b"), latency_ms=((0.0,),),
                          bandwidth={(x, y): 1.0 for x in "ab" for y in "ab"})

    def test_nonpositive_time_scale_rejected(self):
        with pytest.raises(ProfileError):
            uniform_profile(["a"], time_scale=0.0)

    def test_json_round_trip(self):
        p = geo_profile(0.25)
        again = RegionProfile.from_json_dict(p.to_json_dict())
        assert again == p


def test_now_ms_advances():
    a = now_ms()
    time.sleep(0.002)
    assert now_ms() > a
