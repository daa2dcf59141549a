import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgeserve.domain import (
    DEFAULT_INTRA_BW,
    Cluster,
    DeviceSpec,
    GpuSpec,
    InstanceConfig,
    MissingProfileError,
    PipelinePlan,
    PipelineSpec,
    ScenarioError,
    avg_query_latency,
    load_profiles,
    pipeline_goodput,
    system_goodput,
    validate_plan,
    worst_case_pipeline_latency,
    write_profiles,
)
from helpers import AGX, SERVER, chain, cluster, linear_latency, profile


def test_avg_latency_same_device_io_vanishes():
    prof = profile("a", {(SERVER, 4): 40.0}, in_size=100_000)
    assert avg_query_latency(prof, 4, SERVER, DEFAULT_INTRA_BW) == pytest.approx(10.0, abs=0.02)


def test_avg_latency_cross_device_hand_sum():
    prof = profile("a", {(SERVER, 4): 40.0}, in_size=100_000)
    # 40/4 + 100000 B / 1.25 MB/s
    assert avg_query_latency(prof, 4, SERVER, 1_250_000) == pytest.approx(90.0)


def test_avg_latency_identity_batch():
    prof = profile("a", {(SERVER, 1): 12.0}, in_size=1.0)
    assert avg_query_latency(prof, 1, SERVER, DEFAULT_INTRA_BW) == pytest.approx(12.0, abs=1e-6)


def test_avg_latency_unknown_pair_and_dead_link():
    prof = profile("a", {(SERVER, 4): 40.0})
    with pytest.raises(MissingProfileError):
        avg_query_latency(prof, 8, SERVER, 1e6)
    assert avg_query_latency(prof, 4, SERVER, 0.0) == math.inf


def _plan(pid, placements):
    """placements: model -> (device, bz, gpu)."""
    return PipelinePlan(
        pid,
        {m: [InstanceConfig(pid, m, 0, bz, dev, gpu)] for m, (dev, bz, gpu) in placements.items()},
    )


def test_worst_case_two_models():
    cl = cluster()
    profs = {m: profile(m, {(SERVER, 4): 40.0}, in_size=1.0) for m in "ab"}
    pipe = chain("p", ["a", "b"], 200)
    plan = _plan("p", {"a": ("server", 4, "server/g0"), "b": ("server", 4, "server/g0")})
    assert worst_case_pipeline_latency(plan, pipe, cl, profs, {}) == pytest.approx(80.0, abs=1e-4)
    assert pipeline_goodput(80.0) == pytest.approx(12.5)


def test_worst_case_single_identity():
    cl = cluster()
    profs = {"a": profile("a", {(SERVER, 1): 12.0}, in_size=1.0)}
    plan = _plan("p", {"a": ("server", 1, "server/g0")})
    assert worst_case_pipeline_latency(plan, chain("p", ["a"], 100), cl, profs, {}) == pytest.approx(12.0, abs=1e-6)


def test_worst_case_mixed_chain_hand_sum():
    cl = cluster(edges=[("edge0", AGX, 4096, 2)])
    profs = {
        "a": profile("a", {(AGX, 2): 30.0}, in_size=50_000),
        "b": profile("b", {(SERVER, 4): 20.0}, in_size=20_000),
        "c": profile("c", {(SERVER, 8): 16.0}, in_size=1000),
    }
    pipe = chain("p", ["a", "b", "c"], 500, source="edge0")
    plan = _plan("p", {"a": ("edge0", 2, "edge0/g0"), "b": ("server", 4, "server/g0"), "c": ("server", 8, "server/g0")})
    # a: 30 + 2*0.005; b: 20 + 4*20; c: 16 + 8*0.0001
    got = worst_case_pipeline_latency(plan, pipe, cl, profs, {("edge0", "server"): 1e6})
    assert got == pytest.approx(146.0108)


def test_worst_case_dead_link_is_inf():
    cl = cluster(edges=[("edge0", AGX, 4096, 2)])
    profs = {"a": profile("a", {(SERVER, 1): 5.0})}
    plan = _plan("p", {"a": ("server", 1, "server/g0")})
    assert worst_case_pipeline_latency(plan, chain("p", ["a"], 100, "edge0"), cl, profs, {}) == math.inf


def test_goodput_examples():
    assert pipeline_goodput(100.0) == pytest.approx(10.0)
    assert system_goodput([100.0, 200.0]) == pytest.approx(15.0)
    assert pipeline_goodput(math.inf) == 0.0


def test_validate_empty():
    assert validate_plan([], {}, Cluster({"s": DeviceSpec("s", SERVER)}, "s"), {}, {}) == []


def test_validate_memory_boundary():
    cl = cluster(server_mem=1000.0)
    profs = {
        "a": profile("a", {(SERVER, 1): 1.0}, weight=600.0, inter=0.5),
        "b": profile("b", {(SERVER, 1): 1.0}, weight=401.0, inter=0.5),
    }
    pipe = PipelineSpec("p", {"a": ("b",), "b": ()}, 1000, "server")
    plan = PipelinePlan(
        "p",
        {
            "a": [InstanceConfig("p", "a", 0, 1, "server", "server/g0", "s0", 0.0, 100.0, 1.0)],
            "b": [InstanceConfig("p", "b", 0, 1, "server", "server/g0", "s0", 1.0, 100.0, 1.0)],
        },
    )
    v = validate_plan(plan, {"p": pipe}, cl, profs, {})
    assert [x.constraint for x in v] == ["memory"]
    # weights 1001 + one shared 0.5 MiB buffer on the stream
    assert v[0].margin == pytest.approx(1.5)
    assert v[0].subject == "server/g0"


def test_validate_slo_and_util():
    cl = cluster()
    profs = {m: profile(m, {(SERVER, 1): 30.0}, util=0.7) for m in "ab"}
    pipe = chain("p", ["a", "b"], 50)
    plan = _plan("p", {"a": ("server", 1, "server/g0"), "b": ("server", 1, "server/g0")})
    got = sorted((v.constraint, v.subject) for v in validate_plan(plan, {"p": pipe}, cl, profs, {}))
    assert got == [("slo", "p"), ("utilization", "server/g0")]


# -- independent brute-force checker ---------------------------------------


def _naive_violations(plans, pipelines, cl, profs, bw):
    """Walks every instance directly; shares no helper with the package."""
    found = set()
    per_gpu = defaultdict(list)
    for plan in plans:
        pipe = pipelines[plan.pipeline_id]
        total = 0.0
        for m, rs in plan.instances.items():
            if not rs:
                continue
            parent = next((u for u, kids in pipe.dag.items() if m in kids), None)
            srcs = {pipe.source_device} if parent is None else {r.device_id for r in plan.instances.get(parent, [])}
            srcs = srcs or {pipe.source_device}
            worst = 0.0
            for r in rs:
                dc = cl.devices[r.device_id].device_class
                for s in srcs:
                    if s == r.device_id:
                        b = cl.devices[s].intra_bw
                    else:
                        b = bw.get(tuple(sorted((s, r.device_id))), 0.0)
                    lat = math.inf if b <= 0 else profs[m].batch_latency[(dc, r.batch_size)] + r.batch_size * profs[m].in_size / b * 1000
                    worst = max(worst, lat)
            total += worst
        if total > pipe.slo:
            found.add(("slo", plan.pipeline_id))
        for rs in plan.instances.values():
            for r in rs:
                per_gpu[r.gpu_id].append(r)
    for gid, rs in per_gpu.items():
        dev = next(d for d in cl.devices.values() if any(g.gpu_id == gid for g in d.gpus))
        gpu = next(g for g in dev.gpus if g.gpu_id == gid)
        mem = sum(profs[r.model_id].weight_mem for r in rs)
        streams = defaultdict(float)
        for r in rs:
            i = profs[r.model_id].intermediate_mem[r.batch_size]
            if r.stream_id is None:
                mem += i
            else:
                streams[r.stream_id] = max(streams[r.stream_id], i)
        mem += sum(streams.values())
        if mem > gpu.mem_capacity:
            found.add(("memory", gid))
        # the peak of a set of intervals is reached at some interval start
        util = 0.0
        groups = defaultdict(list)
        for r in rs:
            w = profs[r.model_id].utilization[(dev.device_class, r.batch_size)]
            if r.stream_id is None:
                util += w
            else:
                groups[r.duty_cycle].append((r.start_time_in_cycle, r.start_time_in_cycle + r.portion_length, w))
        for ivs in groups.values():
            points = sorted({s for s, _, _ in ivs})
            util += max(sum(w for s, e, w in ivs if s <= t < e) for t in points)
        if util > gpu.max_util + 1e-9:
            found.add(("utilization", gid))
    return found


def _random_plan(rng):
    cl = cluster(server_mem=float(rng.choice([800, 1500, 3000])), edges=[("edge0", AGX, float(rng.choice([500, 1000])), 2)])
    n = int(rng.integers(1, 4))
    models = [f"m{i}" for i in range(n)]
    profs = {
        m: profile(
            m,
            linear_latency(float(rng.uniform(2, 20)), (SERVER, AGX), (1, 2, 4), {AGX: 3.0}),
            util=float(rng.uniform(0.1, 0.6)),
            weight=float(rng.uniform(100, 500)),
            inter=lambda bz: 20.0 * bz,
            in_size=float(rng.choice([1000, 100_000])),
        )
        for m in models
    }
    pipe = chain("p", models, float(rng.choice([60, 150, 400])), source="edge0")
    inst = {}
    for m in models:
        rs = []
        for k in range(int(rng.integers(1, 3))):
            dev = str(rng.choice(["server", "edge0"]))
            gpu = f"{dev}/g0"
            bz = int(rng.choice([1, 2, 4]))
            lat = profs[m].batch_latency[(SERVER if dev == "server" else AGX, bz)]
            if rng.random() < 0.6:
                dc = 100.0
                start = float(rng.uniform(0, max(0.0, dc - lat)))
                rs.append(InstanceConfig("p", m, k, bz, dev, gpu, f"{gpu}/s{int(rng.integers(0, 2))}", start, dc, lat))
            else:
                rs.append(InstanceConfig("p", m, k, bz, dev, gpu))
        inst[m] = rs
    return [PipelinePlan("p", inst)], {"p": pipe}, cl, profs, {("edge0", "server"): float(rng.choice([1e5, 1e6, 1e7]))}


def test_validate_matches_brute_force_on_random_plans():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        plans, pipes, cl, profs, bw = _random_plan(rng)
        got = {(v.constraint, v.subject) for v in validate_plan(plans, pipes, cl, profs, bw)}
        assert got == _naive_violations(plans, pipes, cl, profs, bw)


def test_validate_is_pure():
    rng = np.random.default_rng(5)
    plans, pipes, cl, profs, bw = _random_plan(rng)
    assert validate_plan(plans, pipes, cl, profs, bw) == validate_plan(plans, pipes, cl, profs, bw)


@settings(max_examples=200, deadline=None)
@given(
    base=st.floats(1, 100),
    growth=st.floats(0.1, 1.0),
    in_size=st.floats(1, 1e6),
    bw=st.floats(1e4, 1e9),
)
def test_per_query_latency_non_increasing_for_sublinear_tables(base, growth, in_size, bw):
    prof = profile("a", linear_latency(base, sizes=(1, 2, 4, 8, 16, 32), growth=growth), in_size=in_size)
    lats = [avg_query_latency(prof, b, SERVER, bw) for b in (1, 2, 4, 8, 16, 32)]
    assert all(b <= a + 1e-9 for a, b in zip(lats, lats[1:]))
    assert all(prof.latency(SERVER, b) / b <= prof.latency(SERVER, 1) + 1e-9 for b in (1, 2, 4, 8, 16, 32))


def test_profile_invariants_rejected():
    with pytest.raises(ScenarioError):
        profile("a", {(SERVER, 3): 1.0})
    with pytest.raises(ScenarioError):
        profile("a", {(SERVER, 1): 5.0, (SERVER, 2): 4.0})
    with pytest.raises(ScenarioError):
        profile("a", {(SERVER, 1): 5.0}, util=1.5)
    with pytest.raises(ScenarioError):
        profile("a", {(SERVER, 1): 5.0}, weight=0)


def test_pipeline_dag_checks():
    with pytest.raises(ScenarioError):
        PipelineSpec("p", {"a": ("b",), "b": ("a",)}, 100, "s")
    with pytest.raises(ScenarioError):
        PipelineSpec("p", {"a": (), "b": ()}, 100, "s")
    with pytest.raises(ScenarioError):
        PipelineSpec("p", {"a": ("b",)}, 0, "s")
    p = PipelineSpec("p", {"a": ("c", "b"), "b": ("d",)}, 100, "s")
    assert p.models == ("a", "b", "c", "d")
    assert p.upstream("d") == "b" and p.sinks() == ["c", "d"] and p.depth("d") == 2


def test_gpu_and_cluster_checks():
    with pytest.raises(ScenarioError):
        GpuSpec("g", 0)
    with pytest.raises(ScenarioError):
        GpuSpec("g", 10, max_util=1.2)
    with pytest.raises(ScenarioError):
        GpuSpec("g", 10, stream_count=0)
    with pytest.raises(ScenarioError):
        Cluster({"a": DeviceSpec("a", SERVER)}, "b")


def test_profile_csv_round_trip(tmp_path):
    profs = {
        "a": profile("a", linear_latency(5.0, (SERVER, AGX), (1, 2, 4), {AGX: 3.0}), util=0.25, inter=lambda b: 3.0 * b),
        "b": profile("b", linear_latency(2.0), fanout=2.5),
    }
    write_profiles(profs, tmp_path / "lat.csv", tmp_path / "models.csv")
    back = load_profiles(tmp_path / "lat.csv", tmp_path / "models.csv")
    fields = ("weight_mem", "intermediate_mem", "batch_latency", "utilization", "in_size", "out_size_per_result", "fanout")
    assert sorted(back) == sorted(profs)
    for m in profs:
        assert all(getattr(back[m], f) == getattr(profs[m], f) for f in fields)


def test_profile_csv_errors(tmp_path):
    (tmp_path / "lat.csv").write_text("model_id,device_class,batch_size,latency_ms,util,intermediate_mib\na,server_gpu,x,1,0.1,1\n")
    (tmp_path / "models.csv").write_text("model_id,weight_mib,in_bytes,out_bytes,fanout\na,1,1,1,1\n")
    with pytest.raises(ScenarioError, match=":2"):
        load_profiles(tmp_path / "lat.csv", tmp_path / "models.csv")
    (tmp_path / "bad.csv").write_text("wrong,header\n")
    with pytest.raises(ScenarioError, match="header"):
        load_profiles(tmp_path / "bad.csv", tmp_path / "models.csv")
