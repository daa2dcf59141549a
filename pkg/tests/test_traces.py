import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgeserve.traces import (
    ArrivalTrace,
    BandwidthTrace,
    RateStats,
    TraceError,
    bandwidth_at,
    burstiness,
    downstream_rate,
    load_arrival_trace,
    load_bandwidth_trace,
    mean_bandwidth,
    periodic_arrivals,
    poisson_arrivals,
    rate_stats,
    synthetic_bandwidth,
    transfer_finish,
    write_arrival_trace,
    write_bandwidth_trace,
)


def test_load_three_rows(tmp_path):
    f = tmp_path / "cam.csv"
    f.write_text("timestamp_ms,count\n0,1\n66.7,2\n133.3,1\n")
    tr = load_arrival_trace(f)
    assert len(tr) == 3
    assert tr.events == [(0.0, 1), (66.7, 2), (133.3, 1)]
    assert tr.source_id == "cam"


def test_negative_bandwidth_names_row(tmp_path):
    f = tmp_path / "bw.csv"
    f.write_text("timestamp_ms,bytes_per_sec\n0,100\n1000,-5\n")
    with pytest.raises(TraceError, match=r"bw.csv:3"):
        load_bandwidth_trace(f)


def test_non_monotone_and_parse_errors(tmp_path):
    f = tmp_path / "a.csv"
    f.write_text("timestamp_ms,count\n0,1\n10,1\n10,1\n")
    with pytest.raises(TraceError, match=":4"):
        load_arrival_trace(f)
    f.write_text("timestamp_ms,count\n0,1\nabc,1\n")
    with pytest.raises(TraceError, match=":3"):
        load_arrival_trace(f)
    f.write_text("time,count\n0,1\n")
    with pytest.raises(TraceError, match="header"):
        load_arrival_trace(f)
    f.write_text("timestamp_ms,count\n0,0\n")
    with pytest.raises(TraceError, match=":2"):
        load_arrival_trace(f)


def test_thirty_minute_fifteen_fps_file(tmp_path):
    # written by hand here so the check shares nothing with the generators
    f = tmp_path / "cam.csv"
    with open(f, "w") as fh:
        fh.write("timestamp_ms,count\n")
        for i in range(27_000):
            fh.write(f"{i * 1000 / 15:.4f},1\n")
    tr = load_arrival_trace(f)
    assert len(tr) == 27_000
    st_ = rate_stats(tr, 0.0, 1_800_000.0)
    assert st_.mean_rate == pytest.approx(15.0)
    assert st_.burstiness == pytest.approx(0.0, abs=1e-6)


def test_burstiness_examples():
    assert burstiness([0, 100, 200, 300, 400]) == 0.0
    assert burstiness([0, 50, 200, 250, 400]) == pytest.approx(0.5)
    assert burstiness([0, 10]) is None


def test_burstiness_of_exponential_gaps():
    rng = np.random.default_rng(11)
    ts = np.cumsum(rng.exponential(100.0, 10_000))
    assert burstiness(ts) == pytest.approx(1.0, abs=0.05)


@settings(max_examples=200, deadline=None)
@given(
    gaps=st.lists(st.floats(0.5, 1000.0), min_size=2, max_size=50),
    scale=st.floats(0.01, 100.0),
)
def test_burstiness_scale_invariant(gaps, scale):
    ts = np.concatenate([[0.0], np.cumsum(gaps)])
    assert burstiness(ts * scale) == pytest.approx(burstiness(ts), rel=1e-6, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(gap=st.floats(0.1, 1e4), n=st.integers(3, 200), start=st.floats(0, 1e6))
def test_burstiness_constant_gap_is_zero(gap, n, start):
    assert burstiness([start + i * gap for i in range(n)]) == pytest.approx(0.0, abs=1e-6)


def test_downstream_rate_examples():
    up = RateStats("a", 1000.0, 15.0, 0.7)
    assert downstream_rate("b", up, 2.0).mean_rate == 30.0
    assert downstream_rate("b", up, 2.0).burstiness == 0.7
    assert downstream_rate("b", up, 0.0).mean_rate == 0.0
    end = downstream_rate("c", downstream_rate("b", up, 2.0), 0.5)
    assert end.mean_rate == up.mean_rate


def test_bandwidth_step_lookup():
    tr = BandwidthTrace(("a", "b"), (0.0, 1000.0), (10.0, 20.0))
    assert bandwidth_at(tr, 500) == 10
    assert bandwidth_at(tr, 1000) == 20
    assert bandwidth_at(tr, 5000) == 20
    later = BandwidthTrace(("a", "b"), (100.0, 200.0), (7.0, 9.0))
    assert bandwidth_at(later, 0) == 7


@settings(max_examples=100, deadline=None)
@given(
    vals=st.lists(st.floats(0, 1e9), min_size=1, max_size=20),
    t=st.floats(-1e3, 3e4),
)
def test_bandwidth_right_continuous(vals, t):
    times = tuple(float(i * 1000) for i in range(len(vals)))
    tr = BandwidthTrace(("a", "b"), times, tuple(vals))
    i = max(0, min(len(vals) - 1, math.floor(t / 1000)))
    assert bandwidth_at(tr, t) == vals[i]
    for k, s in enumerate(times):
        assert bandwidth_at(tr, s) == vals[k]


def test_transfer_examples():
    tr = BandwidthTrace(("a", "b"), (0.0,), (1e6,))
    assert transfer_finish(tr, 0.0, 1e6) == pytest.approx(1000.0)
    stall = BandwidthTrace(("a", "b"), (0.0, 500.0), (0.0, 1e6))
    assert transfer_finish(stall, 0.0, 1e6) == pytest.approx(1500.0)
    dead = BandwidthTrace(("a", "b"), (0.0,), (0.0,))
    assert transfer_finish(dead, 0.0, 10) == math.inf
    assert transfer_finish(None, 5.0, 1e6, constant_bw=1e10) == pytest.approx(5.1)


def test_transfer_spans_several_steps():
    tr = BandwidthTrace(("a", "b"), (0.0, 100.0, 300.0), (1000.0, 0.0, 2000.0))
    # 100 B in the first 100 ms, stall until 300, remaining 300 B at 2000 B/s
    assert transfer_finish(tr, 0.0, 400.0) == pytest.approx(450.0)


def test_mean_bandwidth_time_weighted():
    tr = BandwidthTrace(("a", "b"), (0.0, 1000.0), (10.0, 30.0))
    assert mean_bandwidth(tr, 0.0, 2000.0) == pytest.approx(20.0)
    assert mean_bandwidth(tr, 500.0, 1500.0) == pytest.approx(20.0)
    assert mean_bandwidth(tr, 0.0, 4000.0) == pytest.approx(25.0)


def test_periodic_generator():
    tr = periodic_arrivals("cam", 15.0, 60_000.0)
    assert len(tr) == 900
    assert tr.times[1] == pytest.approx(1000 / 15)


def test_poisson_generator_rate_and_determinism():
    a = poisson_arrivals("cam", 15.0, 60_000.0, np.random.default_rng(7))
    b = poisson_arrivals("cam", 15.0, 60_000.0, np.random.default_rng(7))
    assert a == b
    assert abs(len(a) - 900) < 4 * math.sqrt(900)


def test_poisson_surge_windows_alternate():
    tr = poisson_arrivals(
        "cam", 10.0, 600_000.0, np.random.default_rng(3), surge_amplitude=4.0, surge_period_ms=60_000.0, surge_duty=0.5
    )
    hi = [rate_stats(tr, k * 60_000.0, k * 60_000.0 + 30_000.0).mean_rate for k in range(10)]
    lo = [rate_stats(tr, k * 60_000.0 + 30_000.0, (k + 1) * 60_000.0).mean_rate for k in range(10)]
    assert np.mean(hi) / np.mean(lo) == pytest.approx(4.0, rel=0.1)
    assert all(h > l for h, l in zip(hi, lo))


def test_synthetic_bandwidth_deterministic_and_valid():
    a = synthetic_bandwidth(("a", "b"), 1e6, 60_000.0, np.random.default_rng(1), outage_prob=0.1, outage_ms=3000)
    b = synthetic_bandwidth(("a", "b"), 1e6, 60_000.0, np.random.default_rng(1), outage_prob=0.1, outage_ms=3000)
    assert a == b
    assert len(a.times) == 60
    assert min(a.values) == 0.0
    assert all(v >= 0 for v in a.values)


def test_csv_round_trip(tmp_path):
    tr = poisson_arrivals("cam", 20.0, 10_000.0, np.random.default_rng(2))
    write_arrival_trace(tr, tmp_path / "a.csv")
    assert load_arrival_trace(tmp_path / "a.csv", "cam") == tr
    bw = synthetic_bandwidth(("a", "b"), 1e6, 10_000.0, np.random.default_rng(2))
    write_bandwidth_trace(bw, tmp_path / "b.csv")
    assert load_bandwidth_trace(tmp_path / "b.csv", ("a", "b")) == bw


def test_trace_invariants():
    with pytest.raises(TraceError):
        ArrivalTrace("a", (1.0, 1.0), (1, 1))
    with pytest.raises(TraceError):
        ArrivalTrace("a", (1.0,), (0,))
    with pytest.raises(TraceError):
        BandwidthTrace(("a", "b"), (), ())
    with pytest.raises(TraceError):
        RateStats("a", 1.0, -1.0, 0.0)


def test_rate_stats_counts_multi_object_frames():
    tr = ArrivalTrace("cam", (0.0, 500.0), (3, 1))
    st_ = rate_stats(tr, 0.0, 1000.0)
    assert st_.mean_rate == pytest.approx(4.0)
    assert rate_stats(ArrivalTrace("e", (), ()), 0.0, 1000.0).burstiness == 0.0
