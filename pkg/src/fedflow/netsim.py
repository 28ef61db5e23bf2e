"""Deterministic network delay injection for loopback-simulated geo-distribution.

A ``RegionProfile`` holds a one-way latency matrix and a per-region-pair
bandwidth table. Every injected delay (messages, transfers, synthetic compute,
cold starts) is multiplied by the profile's ``time_scale`` so whole experiments
can be compressed for CI without changing relative behavior.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path


class UnknownRegion(KeyError):
    """A region name is not declared in the profile."""


class ProfileError(ValueError):
    """The profile file violates a structural invariant."""


def now_ms() -> float:
    """Wall-clock epoch milliseconds, comparable across local processes."""
    return time.time() * 1000.0


def sleep_for(duration_ms: float) -> None:
    """Suspend the caller for at least duration_ms (jitter bound ~5 ms on Linux)."""
    if duration_ms <= 0:
        return
    deadline = time.perf_counter() + duration_ms / 1000.0
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return
        time.sleep(remaining)


@dataclass(frozen=True)
class RegionProfile:
    """Latency/bandwidth tables shared by every service in a testbed.

    Immutable after construction; safe to share across threads. ``latency_ms``
    is a square matrix indexed like ``regions``; ``bandwidth`` maps
    (from_region, to_region) to sustained bytes/s (same-region pairs included).
    """

    regions: tuple[str, ...]
    latency_ms: tuple[tuple[float, ...], ...]
    bandwidth: dict[tuple[str, str], float]
    time_scale: float = 1.0

    def __post_init__(self) -> None:
        n = len(self.regions)
        if n == 0:
            raise ProfileError("regions: must not be empty")
        if len(set(self.regions)) != n:
            raise ProfileError("regions: duplicate names")
        if len(self.latency_ms) != n or any(len(row) != n for row in self.latency_ms):
            raise ProfileError("latency_ms: matrix dimension must equal regions length")
        for i, row in enumerate(self.latency_ms):
            for j, v in enumerate(row):
                if v < 0:
                    raise ProfileError(f"latency_ms[{i}][{j}]: negative")
                if i == j and v != 0:
                    raise ProfileError(f"latency_ms[{i}][{i}]: diagonal must be 0")
        for a in self.regions:
            for b in self.regions:
                rate = self.bandwidth.get((a, b))
                if rate is None:
                    raise ProfileError(f"bandwidth: missing entry {a}->{b}")
                if not rate > 0:
                    raise ProfileError(f"bandwidth: {a}->{b} must be > 0")
        if not self.time_scale > 0:
            raise ProfileError("time_scale: must be > 0")

    # -- lookups ---------------------------------------------------------

    def _index(self, region: str) -> int:
        try:
            return self.regions.index(region)
        except ValueError:
            raise UnknownRegion(region) from None

    def has_region(self, region: str) -> bool:
        return region in self.regions

    def raw_latency_ms(self, from_region: str, to_region: str) -> float:
        """Unscaled matrix entry."""
        return self.latency_ms[self._index(from_region)][self._index(to_region)]

    def raw_bandwidth(self, from_region: str, to_region: str) -> float:
        self._index(from_region)
        self._index(to_region)
        return self.bandwidth[(from_region, to_region)]

    def message_delay(self, from_region: str, to_region: str) -> float:
        """One-way message latency in ms, scaled."""
        return self.raw_latency_ms(from_region, to_region) * self.time_scale

    def transfer_delay_exact(self, from_region: str, to_region: str, size_bytes: int) -> float:
        """Unrounded transfer time: (latency + size/bandwidth) x time_scale.

        time_scale is applied once to the whole sum so that delays are exactly
        linear in the scale before rounding.
        """
        if size_bytes < 0:
            raise ValueError("size_bytes must be >= 0")
        lat = self.latency_ms[self._index(from_region)][self._index(to_region)]
        rate = self.bandwidth[(from_region, to_region)]
        return (lat + size_bytes / rate * 1000.0) * self.time_scale

    def transfer_delay(self, from_region: str, to_region: str, size_bytes: int) -> int:
        """Transfer time in whole ms, rounded up."""
        return math.ceil(self.transfer_delay_exact(from_region, to_region, size_bytes))

    # -- scaled sleeping -------------------------------------------------

    def scale(self, duration_ms: float) -> float:
        return duration_ms * self.time_scale

    def sleep_scaled(self, duration_ms: float) -> None:
        """Sleep for duration_ms of simulated time (scaled to wall time)."""
        sleep_for(duration_ms * self.time_scale)

    def sleep_raw(self, duration_ms: float) -> None:
        sleep_for(duration_ms)

    # -- (de)serialization ------------------------------------------------

    def to_json_dict(self) -> dict:
        bw: dict[str, dict[str, float]] = {}
        for (a, b), rate in self.bandwidth.items():
            bw.setdefault(a, {})[b] = rate
        return {
            "regions": list(self.regions),
            "latency_ms": [list(row) for row in self.latency_ms],
            "bandwidth": bw,
            "time_scale": self.time_scale,
        }

    @classmethod
    def from_json_dict(cls, doc: dict, time_scale: float | None = None) -> "RegionProfile":
        try:
            regions = tuple(str(r) for r in doc["regions"])
            matrix = tuple(tuple(float(v) for v in row) for row in doc["latency_ms"])
            raw_bw = doc["bandwidth"]
        except (KeyError, TypeError) as exc:
            raise ProfileError(f"profile: missing or malformed field ({exc})") from None
        bandwidth: dict[tuple[str, str], float] = {}
        for a, targets in raw_bw.items():
            for b, rate in targets.items():
                bandwidth[(a, b)] = float(rate)
        ts = float(doc.get("time_scale", 1.0)) if time_scale is None else float(time_scale)
        return cls(regions=regions, latency_ms=matrix, bandwidth=bandwidth, time_scale=ts)

    @classmethod
    def load(cls, path: str | Path, time_scale: float | None = None) -> "RegionProfile":
        with open(path, "rb") as f:
            doc = json.load(f)
        return cls.from_json_dict(doc, time_scale=time_scale)

    def with_time_scale(self, time_scale: float) -> "RegionProfile":
        return RegionProfile(
            regions=self.regions,
            latency_ms=self.latency_ms,
            bandwidth=dict(self.bandwidth),
            time_scale=time_scale,
        )


def uniform_profile(regions: list[str], latency_ms: float = 0.0,
                    bandwidth: float = 1 << 30, time_scale: float = 1.0) -> RegionProfile:
    """Convenience profile: one latency for all distinct pairs, one bandwidth."""
    n = len(regions)
    matrix = tuple(
        tuple(0.0 if i == j else float(latency_ms) for j in range(n)) for i in range(n)
    )
    bw = {(a, b): float(bandwidth) for a in regions for b in regions}
    return RegionProfile(regions=tuple(regions), latency_ms=matrix, bandwidth=bw,
                         time_scale=time_scale)
