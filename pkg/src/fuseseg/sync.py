"""Pairing of asynchronous sensor streams against reference timestamps.

Timestamps are integer microseconds. A sensor sample is valid for a
reference timestamp when its absolute offset is strictly smaller than that
sensor's sampling period.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass


class SyncError(ValueError):
    """Invalid stream: empty, unsorted, or non-positive period."""


@dataclass(frozen=True)
class StreamIndex:
    """Sorted timestamps of one sensor plus its sampling period (both us)."""

    sensor_id: str
    timestamps: tuple[int, ...]
    period: int

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timestamps)
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise SyncError(f"{self.sensor_id}: timestamps must be strictly increasing")
        if self.period <= 0:
            raise SyncError(f"{self.sensor_id}: period must be positive")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "period", int(self.period))

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass(frozen=True)
class SensorMatch:
    index: int
    delta_t: int
    valid: bool


@dataclass(frozen=True)
class BundleRecord:
    reference_t: int
    matches: dict[str, SensorMatch]


def nearest_sample(stream: StreamIndex, t: int) -> tuple[int, int]:
    """Index and signed offset (sample_t - t) of the globally nearest sample.

    Equidistant neighbours resolve to the earlier index.
    """
    if len(stream) == 0:
        raise SyncError(f"{stream.sensor_id}: cannot query an empty stream")
    ts = stream.timestamps
    pos = bisect_left(ts, t)
    if pos == 0:
        return 0, ts[0] - t
    if pos == len(ts):
        return len(ts) - 1, ts[-1] - t
    before, after = ts[pos - 1], ts[pos]
    if t - before <= after - t:
        return pos - 1, before - t
    return pos, after - t


def bundle(reference: StreamIndex, others: list[StreamIndex]) -> list[BundleRecord]:
    """One record per reference timestamp with each sensor's nearest sample.

    A match is valid iff |delta_t| < that sensor's period (strict).
    """
    if len(reference) == 0:
        raise SyncError(f"{reference.sensor_id}: reference stream is empty")
    records = []
    for t in reference.timestamps:
        matches = {}
        for stream in others:
            idx, delta = nearest_sample(stream, t)
            matches[stream.sensor_id] = SensorMatch(idx, delta, abs(delta) < stream.period)
        records.append(BundleRecord(t, matches))
    return records
