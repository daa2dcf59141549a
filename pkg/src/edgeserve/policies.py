"""Scheduling policies: the full system, its ablations and baseline analogs.

All policies consume a :class:`RoundContext` and return placed
:class:`~edgeserve.domain.PipelinePlan` objects with the same schema, so the
simulator is policy-agnostic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import coral as coral_mod
from .cwd import CwdParams, StaticBatches, config_to_plan, cwd_schedule, instances_for, ModelChoice, model_rates
from .domain import (
    Cluster,
    InstanceConfig,
    ModelProfile,
    PipelinePlan,
    PipelineSpec,
    link_bandwidth,
    worst_case_pipeline_latency,
)
from .traces import RateStats


@dataclass(frozen=True)
class PolicyFlags:
    temporal_scheduling: bool
    dynamic_batching: bool
    edge_allowed: bool
    lazy_drop: bool

    def as_tuple(self) -> tuple[bool, bool, bool, bool]:
        return (self.temporal_scheduling, self.dynamic_batching, self.edge_allowed, self.lazy_drop)


@dataclass
class RoundContext:
    time: float
    pipelines: Mapping[str, PipelineSpec]
    cluster: Cluster
    profiles: Mapping[str, ModelProfile]
    stats: Mapping[str, RateStats]
    bandwidth: Mapping[tuple[str, str], float]
    rng: np.random.Generator
    cwd: CwdParams = CwdParams()


@dataclass
class RoundResult:
    plans: list[PipelinePlan]
    placer: object
    rejected: list[str] = field(default_factory=list)
    report: dict = field(default_factory=dict)

    def instances(self) -> list[InstanceConfig]:
        return [r for p in self.plans for r in p.all_instances()]


@dataclass
class SchedulingPolicy:
    name: str
    flags: PolicyFlags
    planner: Callable[[RoundContext], RoundResult]
    autoscale: bool = False

    def on_scheduler_round(self, ctx: RoundContext) -> RoundResult:
        return self.planner(ctx)


# ---------------------------------------------------------------------------
# placers (also used by the autoscaler)


class CoralPlacer:
    """Places clones through CORAL, preferring the template's device."""

    def __init__(self, state: coral_mod.CoralState, pipelines, cluster, profiles, bandwidth):
        self.state = state
        self.pipelines = pipelines
        self.cluster = cluster
        self.profiles = profiles
        self.bandwidth = bandwidth

    def _try(self, r: InstanceConfig) -> InstanceConfig | None:
        pipe = self.pipelines[r.pipeline_id]
        up = coral_mod.upstream_reference(self.state.placed, pipe, r)
        try:
            m_start, _, _ = coral_mod.portion_geometry(r, pipe, self.cluster, self.profiles, up, self.bandwidth)
        except coral_mod.SequencingError:
            return None
        res = self.state.place(r, m_start, pipe.slo / 2)
        return res.instance if res.found else None

    def place_clone(self, template: InstanceConfig, instance_number: int) -> InstanceConfig | None:
        base = InstanceConfig(
            template.pipeline_id, template.model_id, instance_number, template.batch_size, template.device_id, clone=True
        )
        for dev in _clone_devices(self.cluster, template.device_id):
            r = _retarget(base, dev, self.cluster, self.profiles)
            if r is None:
                continue
            placed = self._try(r)
            if placed is not None:
                return placed
        return None

    def remove(self, key: tuple) -> None:
        self.state.remove(key)

    def memory(self) -> dict[str, float]:
        return {g: self.state.gpu_memory_used(g) for g in sorted(self.state.gpus)}


class SpreadPlacer:
    """Best-fit spreading over a device's GPUs, no temporal portions.

    Picks the GPU with the least committed (memory fraction, utilization)
    among those with enough free memory.
    """

    def __init__(self, cluster: Cluster, profiles: Mapping[str, ModelProfile]):
        self.cluster = cluster
        self.profiles = profiles
        self.mem: dict[str, float] = {g.gpu_id: 0.0 for _, g in cluster.all_gpus()}
        self.util: dict[str, float] = {g.gpu_id: 0.0 for _, g in cluster.all_gpus()}
        self.placed: dict[tuple, InstanceConfig] = {}

    def _need(self, r: InstanceConfig) -> float:
        p = self.profiles[r.model_id]
        return p.weight_mem + p.intermediate(r.batch_size)

    def place(self, r: InstanceConfig) -> InstanceConfig | None:
        dev = self.cluster.device(r.device_id)
        prof = self.profiles[r.model_id]
        if not prof.supports(dev.device_class, r.batch_size):
            return None
        need = self._need(r)
        best = None
        for g in dev.gpus:
            if self.mem[g.gpu_id] + need > g.mem_capacity:
                continue
            key = (self.mem[g.gpu_id] / g.mem_capacity, self.util[g.gpu_id], g.gpu_id)
            if best is None or key < best[0]:
                best = (key, g)
        if best is None:
            return None
        g = best[1]
        self.mem[g.gpu_id] += need
        self.util[g.gpu_id] += prof.util(dev.device_class, r.batch_size)
        placed = r.with_(gpu_id=g.gpu_id)
        self.placed[placed.key] = placed
        return placed

    def place_clone(self, template: InstanceConfig, instance_number: int) -> InstanceConfig | None:
        base = InstanceConfig(
            template.pipeline_id, template.model_id, instance_number, template.batch_size, template.device_id, clone=True
        )
        for dev in _clone_devices(self.cluster, template.device_id):
            r = _retarget(base, dev, self.cluster, self.profiles)
            if r is not None and (placed := self.place(r)) is not None:
                return placed
        return None

    def remove(self, key: tuple) -> None:
        r = self.placed.pop(key)
        dclass = self.cluster.device(r.device_id).device_class
        self.mem[r.gpu_id] -= self._need(r)
        self.util[r.gpu_id] -= self.profiles[r.model_id].util(dclass, r.batch_size)

    def memory(self) -> dict[str, float]:
        return dict(sorted(self.mem.items()))


def _clone_devices(cluster: Cluster, device_id: str) -> list[str]:
    return [device_id] if device_id == cluster.server_id else [device_id, cluster.server_id]


def _retarget(r: InstanceConfig, device_id: str, cluster, profiles) -> InstanceConfig | None:
    prof = profiles[r.model_id]
    dc = cluster.device(device_id).device_class
    if prof.supports(dc, r.batch_size):
        return r.with_(device_id=device_id)
    sizes = [b for b in prof.batch_sizes(dc) if b <= r.batch_size]
    return r.with_(device_id=device_id, batch_size=sizes[-1]) if sizes else None


def spread_place(plans: list[PipelinePlan], cluster, profiles) -> tuple[list[PipelinePlan], SpreadPlacer]:
    placer = SpreadPlacer(cluster, profiles)
    todo = [r for p in plans for r in p.all_instances()]

    def need(r):
        prof = profiles[r.model_id]
        return prof.weight_mem + prof.intermediate(r.batch_size)

    # round-robin by instance number so every model gets a first replica
    todo.sort(key=lambda r: (r.instance_number, -need(r), r.key))
    placed = {}
    for r in todo:
        got = placer.place(r)
        if got is not None:
            placed[r.key] = got
    out = []
    for p in plans:
        insts = {m: [placed[r.key] for r in rs if r.key in placed] for m, rs in p.instances.items()}
        unplaced = [r for rs in p.instances.values() for r in rs if r.key not in placed]
        out.append(replace(p, instances=insts, unplaced=unplaced, saturated=p.saturated or bool(unplaced)))
    return out, placer


# ---------------------------------------------------------------------------
# CWD-based policies


def _admit(plans, ctx: RoundContext) -> tuple[list[PipelinePlan], list[str]]:
    """Keep plans whose worst-case latency fits the SLO; others are not deployed."""
    keep, rejected = [], []
    for p in plans:
        pipe = ctx.pipelines[p.pipeline_id]
        lat = worst_case_pipeline_latency(p, pipe, ctx.cluster, ctx.profiles, ctx.bandwidth)
        if lat <= pipe.slo:
            keep.append(p)
        else:
            rejected.append(p.pipeline_id)
            keep.append(PipelinePlan(p.pipeline_id, {m: [] for m in p.instances}, lat, 0.0, True))
    return keep, rejected


def _cwd_plans(ctx: RoundContext, **overrides) -> tuple[list[PipelinePlan], list[str]]:
    params = replace(ctx.cwd, **overrides)
    plans = cwd_schedule(
        [ctx.pipelines[k] for k in sorted(ctx.pipelines)],
        ctx.cluster,
        ctx.profiles,
        ctx.stats,
        params,
        ctx.bandwidth,
    )
    return _admit(plans, ctx)


def _with_coral(plans, rejected, ctx: RoundContext) -> RoundResult:
    res = coral_mod.coral_schedule(plans, ctx.pipelines, ctx.cluster, ctx.profiles, ctx.bandwidth)
    placer = CoralPlacer(res.state, ctx.pipelines, ctx.cluster, ctx.profiles, ctx.bandwidth)
    return RoundResult(res.plans, placer, rejected, res.report())


def _with_spread(plans, rejected, ctx: RoundContext) -> RoundResult:
    plans, placer = spread_place(plans, ctx.cluster, ctx.profiles)
    return RoundResult(plans, placer, rejected, {"gpus": placer.memory()})


def policy_octopinf() -> SchedulingPolicy:
    def plan(ctx):
        plans, rejected = _cwd_plans(ctx, edge_allowed=True, dynamic_batching=True, cycle_capacity=True)
        return _with_coral(plans, rejected, ctx)

    return SchedulingPolicy("octopinf", PolicyFlags(True, True, True, False), plan, autoscale=True)


def policy_no_coral() -> SchedulingPolicy:
    def plan(ctx):
        plans, rejected = _cwd_plans(ctx, edge_allowed=True, dynamic_batching=True, cycle_capacity=True)
        return _with_spread(plans, rejected, ctx)

    return SchedulingPolicy("no_coral", PolicyFlags(False, True, True, False), plan, autoscale=True)


def policy_static_batch(static: StaticBatches = StaticBatches()) -> SchedulingPolicy:
    """Ablation: CWD placement with fixed batches, still temporally scheduled."""

    def plan(ctx):
        plans, rejected = _cwd_plans(ctx, edge_allowed=True, dynamic_batching=False, cycle_capacity=True, static=static)
        return _with_coral(plans, rejected, ctx)

    return SchedulingPolicy("static_batch", PolicyFlags(True, False, True, False), plan, autoscale=True)


def policy_server_only() -> SchedulingPolicy:
    def plan(ctx):
        plans, rejected = _cwd_plans(ctx, edge_allowed=False, dynamic_batching=True, cycle_capacity=True)
        return _with_coral(plans, rejected, ctx)

    return SchedulingPolicy("server_only", PolicyFlags(True, True, False, False), plan, autoscale=True)


# ---------------------------------------------------------------------------
# baseline analogs (no temporal scheduling, fixed batches)


def _static_plan(ctx: RoundContext, pipe: PipelineSpec, on_edge: set[str], static: StaticBatches) -> PipelinePlan:
    rates = model_rates(pipe, ctx.stats[pipe.pipeline_id], ctx.profiles)
    cfg = {}
    for m in pipe.models:
        dev = pipe.source_device if m in on_edge else ctx.cluster.server_id
        dc = ctx.cluster.device(dev).device_class
        prof = ctx.profiles[m]
        bz = static.pick(prof, dc, m == pipe.source, dev == ctx.cluster.server_id)
        n = instances_for(rates[m].mean_rate, prof, dc, bz, 0.0, ctx.cwd.max_instances_per_model)
        cfg[m] = ModelChoice(dev, bz, n)
    return config_to_plan(pipe, cfg, ctx.cluster, ctx.profiles, ctx.bandwidth, rates[pipe.source].mean_rate)


def _edge_prefixes(pipe: PipelineSpec) -> list[set[str]]:
    return [set(pipe.models[:k]) for k in range(len(pipe.models) + 1)]


def _edge_mem(ctx, pipe, on_edge, static) -> float:
    plan = _static_plan(ctx, pipe, on_edge, static)
    total = 0.0
    for m in on_edge:
        for r in plan.instances[m]:
            prof = ctx.profiles[m]
            total += prof.weight_mem + prof.intermediate(r.batch_size)
    return total


def _device_mem(cluster: Cluster, dev: str) -> float:
    return sum(g.mem_capacity for g in cluster.device(dev).gpus)


def policy_static_split(
    static_bz_edge: int = 4, static_bz_server: int = 8, static_bz_detector: int = 2
) -> SchedulingPolicy:
    """Distream-style analog: seeded hill-climbing over single split points.

    The score is the busiest of edge GPU, server GPU and uplink, each as a
    load fraction; the search starts from a random split and moves to a
    strictly better neighbour until none exists.
    """
    static = StaticBatches(static_bz_edge, static_bz_server, static_bz_detector)

    def plan(ctx: RoundContext):
        load: dict[str, float] = {}
        plans = []
        for pid in sorted(ctx.pipelines):
            pipe = ctx.pipelines[pid]
            cands = _edge_prefixes(pipe)
            dev = ctx.cluster.devices.get(pipe.source_device)
            room = _device_mem(ctx.cluster, pipe.source_device) if dev is not None else 0.0
            feasible = [
                i
                for i, c in enumerate(cands)
                if not c or (room > 0 and load.get(("mem", pipe.source_device), 0.0) + _edge_mem(ctx, pipe, c, static) <= room)
            ]

            def score(i):
                return _balance_score(ctx, pipe, cands[i], static, load)

            pos = feasible[int(ctx.rng.integers(len(feasible)))]
            cur = score(pos)
            while True:
                j = feasible.index(pos)
                nbrs = [feasible[k] for k in (j - 1, j + 1) if 0 <= k < len(feasible)]
                scored = sorted((score(n), n) for n in nbrs)
                if scored and scored[0][0] < cur - 1e-12:
                    cur, pos = scored[0]
                else:
                    break
            chosen = cands[pos]
            p = _static_plan(ctx, pipe, chosen, static)
            _accumulate(ctx, pipe, p, load)
            load[("mem", pipe.source_device)] = load.get(("mem", pipe.source_device), 0.0) + _edge_mem(
                ctx, pipe, chosen, static
            )
            plans.append(p)
        return _with_spread(plans, [], ctx)

    return SchedulingPolicy("distream", PolicyFlags(False, False, True, True), plan)


def _plan_loads(ctx, pipe, plan) -> dict:
    rates = model_rates(pipe, ctx.stats[pipe.pipeline_id], ctx.profiles)
    out: dict = {}
    for m in pipe.models:
        r = plan.instances[m][0]
        dev = ctx.cluster.device(r.device_id)
        prof = ctx.profiles[m]
        per_q = prof.latency(dev.device_class, r.batch_size) / r.batch_size / 1000.0
        ngpu = max(len(dev.gpus), 1)
        out[("gpu", r.device_id)] = out.get(("gpu", r.device_id), 0.0) + rates[m].mean_rate * per_q / ngpu
        up = pipe.upstream(m)
        src = pipe.source_device if up is None else plan.instances[up][0].device_id
        if src != r.device_id:
            bw = link_bandwidth(ctx.cluster, ctx.bandwidth, src, r.device_id)
            frac = math.inf if bw <= 0 else rates[m].mean_rate * prof.in_size / bw
            key = ("link", *sorted((src, r.device_id)))
            out[key] = out.get(key, 0.0) + frac
    return out


def _accumulate(ctx, pipe, plan, load) -> None:
    for k, v in _plan_loads(ctx, pipe, plan).items():
        load[k] = load.get(k, 0.0) + v


def _balance_score(ctx, pipe, on_edge, static, load) -> float:
    p = _static_plan(ctx, pipe, on_edge, static)
    mine = _plan_loads(ctx, pipe, p)
    keys = set(mine) | {k for k in load if k[0] != "mem"}
    return max((load.get(k, 0.0) + mine.get(k, 0.0) for k in keys), default=0.0)


def policy_edge_max(static: StaticBatches = StaticBatches()) -> SchedulingPolicy:
    """Rim-style analog: as many models on the edge as memory allows."""

    def plan(ctx: RoundContext):
        used: dict[str, float] = {}
        plans = []
        for pid in sorted(ctx.pipelines):
            pipe = ctx.pipelines[pid]
            dev = ctx.cluster.devices.get(pipe.source_device)
            room = _device_mem(ctx.cluster, pipe.source_device) if dev is not None else 0.0
            chosen: set[str] = set()
            for cand in _edge_prefixes(pipe)[1:]:
                need = _edge_mem(ctx, pipe, cand, static)
                if room > 0 and used.get(pipe.source_device, 0.0) + need <= room:
                    chosen = cand
                else:
                    break
            used[pipe.source_device] = used.get(pipe.source_device, 0.0) + _edge_mem(ctx, pipe, chosen, static)
            plans.append(_static_plan(ctx, pipe, chosen, static))
        return _with_spread(plans, [], ctx)

    return SchedulingPolicy("edge_max", PolicyFlags(False, False, True, True), plan)


def policy_jellyfish(static: StaticBatches = StaticBatches(server=8)) -> SchedulingPolicy:
    """Centralized analog: everything on the server, downstream batches fixed at 8.

    The detector's batch is the smallest one whose single replica keeps up
    with the frame rate.
    """

    def plan(ctx: RoundContext):
        plans = []
        server = ctx.cluster.server_id
        dc = ctx.cluster.server.device_class
        for pid in sorted(ctx.pipelines):
            pipe = ctx.pipelines[pid]
            rates = model_rates(pipe, ctx.stats[pid], ctx.profiles)
            cfg = {}
            for m in pipe.models:
                prof = ctx.profiles[m]
                if m == pipe.source:
                    sizes = prof.batch_sizes(dc)
                    bz = next(
                        (b for b in sizes if instances_for(rates[m].mean_rate, prof, dc, b, 0.0, 99) == 1),
                        sizes[-1],
                    )
                else:
                    bz = static.pick(prof, dc, False, True)
                n = instances_for(rates[m].mean_rate, prof, dc, bz, 0.0, ctx.cwd.max_instances_per_model)
                cfg[m] = ModelChoice(server, bz, n)
            plans.append(config_to_plan(pipe, cfg, ctx.cluster, ctx.profiles, ctx.bandwidth, rates[pipe.source].mean_rate))
        return _with_spread(plans, [], ctx)

    return SchedulingPolicy("jellyfish", PolicyFlags(False, False, False, False), plan)


POLICIES: dict[str, Callable[[], SchedulingPolicy]] = {
    "octopinf": policy_octopinf,
    "no_coral": policy_no_coral,
    "static_batch": policy_static_batch,
    "server_only": policy_server_only,
    "edge_max": policy_edge_max,
    "distream": policy_static_split,
    "jellyfish": policy_jellyfish,
}


def get_policy(name: str) -> SchedulingPolicy:
    try:
        return POLICIES[name]()
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {', '.join(POLICIES)}") from None
