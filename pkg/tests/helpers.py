"""Builders for small hand-made clusters, profiles and scenarios."""
from __future__ import annotations

import numpy as np

from edgeserve.autoscaler import ScalerPolicy
from edgeserve.cwd import CwdParams
from edgeserve.domain import Cluster, DeviceSpec, GpuSpec, ModelProfile, PipelineSpec, link_key
from edgeserve.scenario import Scenario, SimParams
from edgeserve.traces import ArrivalTrace, RateStats

SERVER = "server_gpu"
AGX = "edge_agx"


def profile(
    model_id,
    latency,
    util=0.2,
    weight=100.0,
    inter=10.0,
    in_size=1000.0,
    out_size=100.0,
    fanout=1.0,
):
    """``latency`` maps (device_class, bz) -> ms; util and inter may be scalars."""
    utils = {k: (util(k) if callable(util) else util) for k in latency}
    inters = {bz: (inter(bz) if callable(inter) else inter) for _, bz in latency}
    return ModelProfile(model_id, weight, inters, dict(latency), utils, in_size, out_size, fanout)


def linear_latency(base, classes=(SERVER,), sizes=(1, 2, 4, 8), slow=None, growth=0.75):
    """Batch latency base * bz**growth, scaled per device class by ``slow``."""
    slow = slow or {}
    return {(dc, bz): base * slow.get(dc, 1.0) * bz**growth for dc in classes for bz in sizes}


def cluster(server_mem=24576.0, server_streams=2, edges=(), server_gpus=1, server_util=1.0):
    """Server plus edge devices given as (device_id, class, mem_mib, streams)."""
    devs = {
        "server": DeviceSpec(
            "server",
            SERVER,
            tuple(GpuSpec(f"server/g{i}", server_mem, server_util, server_streams) for i in range(server_gpus)),
        )
    }
    for dev_id, dc, mem, streams in edges:
        devs[dev_id] = DeviceSpec(dev_id, dc, (GpuSpec(f"{dev_id}/g0", mem, 1.0, streams),))
    return Cluster(devs, "server")


def chain(pipeline_id, models, slo, source="server"):
    dag = {m: (n,) for m, n in zip(models, models[1:])}
    dag.setdefault(models[-1], ())
    return PipelineSpec(pipeline_id, dag, slo, source)


def flat_stats(rate, burstiness=0.0, window=360_000.0, model_id="src"):
    return RateStats(model_id, window, rate, burstiness)


def periodic(pid, fps, horizon):
    n = int(horizon * fps / 1000.0)
    step = 1000.0 / fps
    return ArrivalTrace(pid, tuple(i * step for i in range(n)), (1,) * n)


def scenario(
    cluster_,
    pipelines,
    profiles,
    arrivals,
    links=None,
    horizon=60_000.0,
    period=None,
    interference="none",
    scaler_enabled=False,
    cwd=None,
    scaler=None,
    event_log=False,
    name="test",
):
    return Scenario(
        name=name,
        cluster=cluster_,
        pipelines={p.pipeline_id: p for p in pipelines},
        profiles=profiles,
        arrivals=arrivals,
        links=links or {},
        horizon=horizon,
        period=period if period is not None else horizon - 1.0,
        seed=0,
        cwd=cwd or CwdParams(),
        scaler=scaler or ScalerPolicy(),
        scaler_enabled=scaler_enabled,
        sim=SimParams(interference=interference, sample_ms=1000.0, event_log=event_log),
    )


def random_problem(rng: np.random.Generator, n_models=(2, 6), n_devices=(1, 4), n_gpus=(1, 2)):
    """A random tree pipeline on a random cluster; returns (cluster, pipeline, profiles, stats, bandwidth).

    Device 0 is the server; the others are edge devices, one of which is the source.
    """
    nd = int(rng.integers(n_devices[0], n_devices[1] + 1))
    devs = {}
    for d in range(nd):
        dev_id = "server" if d == 0 else f"edge{d}"
        dc = SERVER if d == 0 else AGX
        gpus = tuple(
            GpuSpec(
                f"{dev_id}/g{g}",
                float(rng.choice([1024, 2048, 4096, 8192] if d else [8192, 16384, 24576])),
                float(rng.choice([0.8, 1.0])),
                int(rng.integers(1, 4)),
            )
            for g in range(int(rng.integers(n_gpus[0], n_gpus[1] + 1)))
        )
        devs[dev_id] = DeviceSpec(dev_id, dc, gpus)
    cl = Cluster(devs, "server")
    nm = int(rng.integers(n_models[0], n_models[1] + 1))
    names = [f"m{i}" for i in range(nm)]
    dag = {m: [] for m in names}
    for i in range(1, nm):
        dag[names[int(rng.integers(0, i))]].append(names[i])
    source = "server" if nd == 1 else f"edge{int(rng.integers(1, nd))}"
    slo = float(rng.choice([100, 200, 300, 500]))
    pipe = PipelineSpec("p", {m: tuple(v) for m, v in dag.items()}, slo, source)
    profiles = {}
    for m in names:
        base = float(rng.uniform(1, 15))
        lat = linear_latency(base, (SERVER, AGX), (1, 2, 4, 8, 16), {AGX: float(rng.uniform(2, 5))}, float(rng.uniform(0.5, 0.9)))
        w = float(rng.uniform(0.05, 0.5))
        profiles[m] = profile(
            m,
            lat,
            util=lambda k, w=w: min(1.0, w * (1.15 ** np.log2(k[1])) * (2.0 if k[0] == AGX else 1.0)),
            weight=float(rng.uniform(50, 600)),
            inter=lambda bz, i=float(rng.uniform(5, 60)): i * bz,
            in_size=float(rng.choice([1000, 5000, 50_000, 200_000])),
            out_size=float(rng.choice([100, 1000, 10_000])),
            fanout=float(rng.choice([0.5, 1.0, 2.0])),
        )
    stats = {"p": RateStats(pipe.source, 360_000.0, float(rng.uniform(1, 60)), float(rng.uniform(0, 2)))}
    bw = {link_key(f"edge{d}", "server"): float(rng.choice([1e6, 5e6, 2e7])) for d in range(1, nd)}
    return cl, pipe, profiles, stats, bw


# criterion number -> one-line outcome, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if ok else 'FAIL'}] {number}. {title}" + (f": {detail}" if detail else "")
    return ok
