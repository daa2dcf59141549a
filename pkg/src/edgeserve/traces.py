"""Arrival and bandwidth traces, rate / burstiness statistics and generators."""
from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class ArrivalTrace:
    source_id: str
    times: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if len(self.times) != len(self.counts):
            raise TraceError("times and counts differ in length")
        for i in range(1, len(self.times)):
            if not self.times[i] > self.times[i - 1]:
                raise TraceError(f"{self.source_id}: timestamps not strictly increasing at event {i}")
        if any(c < 1 for c in self.counts):
            raise TraceError(f"{self.source_id}: counts must be >= 1")

    def __len__(self):
        return len(self.times)

    @property
    def events(self) -> list[tuple[float, int]]:
        return list(zip(self.times, self.counts))

    def window(self, start: float, end: float) -> "ArrivalTrace":
        lo = bisect.bisect_left(self.times, start)
        hi = bisect.bisect_left(self.times, end)
        return ArrivalTrace(self.source_id, self.times[lo:hi], self.counts[lo:hi])

    def query_times(self) -> list[float]:
        """Timestamps expanded by count (one entry per query)."""
        out = []
        for t, c in zip(self.times, self.counts):
            out.extend([t] * c)
        return out


@dataclass(frozen=True)
class BandwidthTrace:
    link: tuple[str, str]
    times: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if not self.times:
            raise TraceError(f"{self.link}: bandwidth trace is empty")
        if len(self.times) != len(self.values):
            raise TraceError("times and values differ in length")
        for i in range(1, len(self.times)):
            if not self.times[i] > self.times[i - 1]:
                raise TraceError(f"{self.link}: timestamps not strictly increasing at sample {i}")
        if any(v < 0 for v in self.values):
            raise TraceError(f"{self.link}: negative bandwidth")


@dataclass(frozen=True)
class RateStats:
    model_id: str
    window: float  # ms
    mean_rate: float  # queries/s
    burstiness: float

    def __post_init__(self):
        if self.mean_rate < 0 or self.burstiness < 0:
            raise TraceError("rate and burstiness must be >= 0")


# ---------------------------------------------------------------------------
# CSV IO


def _parse_rows(path: Path, header: Sequence[str]):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [h.strip() for h in first] != list(header):
            raise TraceError(f"{path}:1: expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise TraceError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def load_arrival_trace(path: str | Path, source_id: str | None = None) -> ArrivalTrace:
    times, counts = [], []
    for lineno, (t, c) in _parse_rows(path, ("timestamp_ms", "count")):
        try:
            t, c = float(t), int(c)
        except ValueError as exc:
            raise TraceError(f"{path}:{lineno}: {exc}") from None
        if c < 1:
            raise TraceError(f"{path}:{lineno}: count must be >= 1, got {c}")
        if times and t <= times[-1]:
            raise TraceError(f"{path}:{lineno}: timestamp {t} is not after {times[-1]}")
        times.append(t)
        counts.append(c)
    return ArrivalTrace(source_id or Path(path).stem, tuple(times), tuple(counts))


def load_bandwidth_trace(path: str | Path, link: tuple[str, str] | None = None) -> BandwidthTrace:
    times, values = [], []
    for lineno, (t, v) in _parse_rows(path, ("timestamp_ms", "bytes_per_sec")):
        try:
            t, v = float(t), float(v)
        except ValueError as exc:
            raise TraceError(f"{path}:{lineno}: {exc}") from None
        if v < 0 or math.isnan(v):
            raise TraceError(f"{path}:{lineno}: negative bandwidth {v}")
        if times and t <= times[-1]:
            raise TraceError(f"{path}:{lineno}: timestamp {t} is not after {times[-1]}")
        times.append(t)
        values.append(v)
    if not times:
        raise TraceError(f"{path}: no samples")
    return BandwidthTrace(link or (Path(path).stem, ""), tuple(times), tuple(values))


def _fmt(x: float) -> str:
    return repr(float(x)) if x != int(x) else str(int(x))


def write_arrival_trace(trace: ArrivalTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("timestamp_ms,count\n")
        for t, c in zip(trace.times, trace.counts):
            fh.write(f"{_fmt(t)},{c}\n")


def write_bandwidth_trace(trace: BandwidthTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("timestamp_ms,bytes_per_sec\n")
        for t, v in zip(trace.times, trace.values):
            fh.write(f"{_fmt(t)},{_fmt(v)}\n")


# ---------------------------------------------------------------------------
# Statistics


def burstiness(timestamps: Sequence[float]) -> float | None:
    """Coefficient of variation (population std / mean) of inter-arrival gaps.

    Returns None with fewer than three timestamps; callers treat that as 0.
    """
    if len(timestamps) < 3:
        return None
    gaps = np.diff(np.asarray(timestamps, dtype=float))
    mean = gaps.mean()
    if mean <= 0:
        return 0.0
    return float(gaps.std() / mean)


def rate_stats(trace: ArrivalTrace, start: float, end: float, model_id: str | None = None) -> RateStats:
    """Mean rate and burstiness of the queries arriving in [start, end)."""
    win = trace.window(start, end)
    span = end - start
    rate = sum(win.counts) / (span / 1000.0) if span > 0 else 0.0
    cov = burstiness(win.query_times())
    return RateStats(model_id or trace.source_id, span, rate, cov or 0.0)


def downstream_rate(model_id: str, upstream: RateStats, fanout: float) -> RateStats:
    # burstiness passes through unchanged
    return RateStats(model_id, upstream.window, upstream.mean_rate * fanout, upstream.burstiness)


def bandwidth_at(trace: BandwidthTrace, time: float) -> float:
    """Step-function lookup; times before the first sample read the first value."""
    i = bisect.bisect_right(trace.times, time) - 1
    return trace.values[max(i, 0)]


def next_change(trace: BandwidthTrace, time: float) -> float:
    i = bisect.bisect_right(trace.times, time)
    return trace.times[i] if i < len(trace.times) else math.inf


def mean_bandwidth(trace: BandwidthTrace, start: float, end: float) -> float:
    """Time-weighted mean over [start, end)."""
    if end <= start:
        return bandwidth_at(trace, start)
    total, t = 0.0, start
    while t < end:
        nxt = min(next_change(trace, t), end)
        total += bandwidth_at(trace, t) * (nxt - t)
        t = nxt
    return total / (end - start)


def transfer_finish(trace: BandwidthTrace | None, start: float, nbytes: float, constant_bw: float = math.inf) -> float:
    """Completion time of sending ``nbytes`` from ``start`` over a step bandwidth.

    Integrates the piecewise-constant rate; zero-bandwidth stretches stall the
    transfer.  Returns inf if the link never comes back.
    """
    if nbytes <= 0:
        return start
    if trace is None:
        return start + nbytes / constant_bw * 1000.0 if constant_bw > 0 else math.inf
    t, left = start, float(nbytes)
    while True:
        bw = bandwidth_at(trace, t)
        nxt = next_change(trace, t)
        if bw > 0:
            need = left / bw * 1000.0
            if t + need <= nxt:
                return t + need
            left -= bw * (nxt - t) / 1000.0
        if math.isinf(nxt):
            return math.inf
        t = nxt


# ---------------------------------------------------------------------------
# Generators


def periodic_arrivals(source_id: str, fps: float, duration_ms: float, start_ms: float = 0.0) -> ArrivalTrace:
    """One query per frame at a fixed frame rate."""
    n = int(math.floor(duration_ms * fps / 1000.0 + 1e-9))
    step = 1000.0 / fps
    return ArrivalTrace(source_id, tuple(start_ms + i * step for i in range(n)), (1,) * n)


def poisson_arrivals(
    source_id: str,
    rate: float,
    duration_ms: float,
    rng: np.random.Generator,
    surge_amplitude: float = 1.0,
    surge_period_ms: float = 0.0,
    surge_duty: float = 0.5,
) -> ArrivalTrace:
    """Poisson arrivals, optionally modulated by a square wave.

    During the first ``surge_duty`` fraction of every surge period the rate is
    multiplied by ``surge_amplitude``.
    """
    segments = []
    if surge_period_ms > 0 and surge_amplitude != 1.0:
        t = 0.0
        while t < duration_ms:
            hi = min(t + surge_period_ms * surge_duty, duration_ms)
            segments.append((t, hi, rate * surge_amplitude))
            lo = min(t + surge_period_ms, duration_ms)
            if lo > hi:
                segments.append((hi, lo, rate))
            t += surge_period_ms
    else:
        segments.append((0.0, duration_ms, rate))
    times: list[float] = []
    for lo, hi, r in segments:
        if r <= 0:
            continue
        t = lo
        while True:
            t += rng.exponential(1000.0 / r)
            if t >= hi:
                break
            # millisecond resolution keeps CSV round-trips exact
            tr = round(t, 3)
            if not times or tr > times[-1]:
                times.append(tr)
    return ArrivalTrace(source_id, tuple(times), (1,) * len(times))


def synthetic_bandwidth(
    link: tuple[str, str],
    mean_bps: float,
    duration_ms: float,
    rng: np.random.Generator,
    step_ms: float = 1000.0,
    volatility: float = 0.25,
    outage_prob: float = 0.0,
    outage_ms: float = 5000.0,
    floor_frac: float = 0.1,
) -> BandwidthTrace:
    """Mean-reverting log-normal bandwidth walk with optional outages."""
    times, vals = [], []
    x = 0.0
    out_until = -1.0
    t = 0.0
    while t < duration_ms:
        x = 0.8 * x + rng.normal(0.0, volatility)
        v = max(mean_bps * math.exp(x - volatility**2), mean_bps * floor_frac)
        if t < out_until:
            v = 0.0
        elif outage_prob > 0 and rng.random() < outage_prob:
            out_until = t + outage_ms
            v = 0.0
        times.append(t)
        vals.append(round(v))
        t += step_ms
    return BandwidthTrace(link, tuple(times), tuple(float(v) for v in vals))
