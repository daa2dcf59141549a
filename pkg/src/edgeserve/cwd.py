"""Cross-device workload distribution.

Chooses batch size, host device and replica count for every model of every
pipeline.  Batch sizes are explored greedily, burstiest model first; models
are then pushed towards the data source's edge device depth-first and pulled
back when keeping them on the edge would not cut network traffic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .domain import (
    DEFAULT_BZ,
    Cluster,
    InstanceConfig,
    ModelProfile,
    PipelinePlan,
    PipelineSpec,
    link_bandwidth,
    link_key,
)
from .traces import RateStats, downstream_rate

_EPS = 1e-9


@dataclass(frozen=True)
class StaticBatches:
    """Fixed batch sizes used when dynamic batching is off."""

    edge: int = 4
    server: int = 8
    source: int = 2

    def pick(self, profile: ModelProfile, device_class: str, is_source: bool, on_server: bool) -> int:
        want = self.source if is_source else (self.server if on_server else self.edge)
        sizes = profile.batch_sizes(device_class)
        fit = [b for b in sizes if b <= want]
        return fit[-1] if fit else sizes[0]


@dataclass(frozen=True)
class CwdParams:
    alpha: float = 1.0
    bz_set: tuple[int, ...] = DEFAULT_BZ
    max_instances_per_model: int = 8
    edge_allowed: bool = True
    dynamic_batching: bool = True
    # size replicas for one batch per duty cycle (temporal execution)
    cycle_capacity: bool = True
    static: StaticBatches = StaticBatches()
    # replicas cover mean rate x headroom
    headroom: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not self.bz_set or any(b < 1 or b & (b - 1) for b in self.bz_set):
            raise ValueError("bz_set must be non-empty powers of two")
        if self.max_instances_per_model < 1:
            raise ValueError("max_instances_per_model must be >= 1")
        if self.headroom < 1:
            raise ValueError("headroom must be >= 1")


@dataclass(frozen=True)
class ModelChoice:
    device_id: str
    batch_size: int
    instances: int


Config = dict[str, ModelChoice]


@dataclass
class CwdState:
    """Working state across pipelines: per-device memory already committed."""

    device_mem_used: dict[str, float] = field(default_factory=dict)
    configs: dict[str, Config] = field(default_factory=dict)
    rates: dict[tuple[str, str], RateStats] = field(default_factory=dict)
    visit_log: list[tuple[str, str]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# estimators


def instance_capacity(profile: ModelProfile, device_class: str, bz: int, cycle_ms: float = 0.0) -> float:
    """Queries/s one replica serves: a full batch per max(batch latency, cycle)."""
    return bz * 1000.0 / max(profile.latency(device_class, bz), cycle_ms)


def instances_for(rate: float, profile, device_class, bz, cycle_ms, max_instances) -> int:
    cap = instance_capacity(profile, device_class, bz, cycle_ms)
    need = math.ceil(rate / cap - _EPS) if rate > 0 else 1
    return max(1, min(need, max_instances))


def est_latency(
    pipeline: PipelineSpec,
    config: Mapping[str, ModelChoice],
    cluster: Cluster,
    profiles: Mapping[str, ModelProfile],
    bandwidth: Mapping[tuple[str, str], float],
) -> float:
    """Worst-case pipeline latency (ms) of a working configuration; inf on a dead link."""
    total = 0.0
    for m in pipeline.models:
        c = config[m]
        up = pipeline.upstream(m)
        src = pipeline.source_device if up is None else config[up].device_id
        bw = link_bandwidth(cluster, bandwidth, src, c.device_id)
        if bw <= 0:
            return math.inf
        prof = profiles[m]
        dc = cluster.device(c.device_id).device_class
        total += prof.latency(dc, c.batch_size) + c.batch_size * prof.in_size / bw * 1000.0
    return total


def est_throughput(
    pipeline: PipelineSpec,
    config: Mapping[str, ModelChoice],
    cluster: Cluster,
    profiles: Mapping[str, ModelProfile],
    source_rate: float,
    cycle_ms: float = 0.0,
    bandwidth: Mapping[tuple[str, str], float] | None = None,
) -> float:
    """Bottleneck service rate in source queries/s, capped at the offered rate.

    Each model's capacity is divided by the expected number of queries it
    receives per source query, so models with different fanouts compare.
    With ``bandwidth`` given, every cross-device link is a bottleneck too:
    its bytes/s divided by the bytes it carries per source query.
    """
    fan = pipeline.cumulative_fanout(profiles)
    best = source_rate
    link_bytes: dict[tuple[str, str], float] = {}
    for m in pipeline.models:
        if fan[m] <= 0:
            continue
        c = config[m]
        dc = cluster.device(c.device_id).device_class
        cap = c.instances * instance_capacity(profiles[m], dc, c.batch_size, cycle_ms)
        best = min(best, cap / fan[m])
        up = pipeline.upstream(m)
        src = pipeline.source_device if up is None else config[up].device_id
        if src != c.device_id:
            key = link_key(src, c.device_id)
            link_bytes[key] = link_bytes.get(key, 0.0) + profiles[m].in_size * fan[m]
    if bandwidth is not None:
        for (a, b), per_query in link_bytes.items():
            best = min(best, link_bandwidth(cluster, bandwidth, a, b) / per_query)
    return max(best, 0.0)


def model_rates(pipeline: PipelineSpec, source: RateStats, profiles: Mapping[str, ModelProfile]) -> dict[str, RateStats]:
    rates = {pipeline.source: RateStats(pipeline.source, source.window, source.mean_rate, source.burstiness)}
    for m in pipeline.models[1:]:
        up = pipeline.upstream(m)
        rates[m] = downstream_rate(m, rates[up], profiles[up].fanout)
    return rates


def overhead_in(profile: ModelProfile, rate: RateStats) -> float:
    """Bytes/s of input the model pulls over a split link."""
    return profile.in_size * rate.mean_rate


def overhead_out(profile: ModelProfile, rate: RateStats) -> float:
    return profile.out_size_per_result * profile.fanout * rate.mean_rate


# ---------------------------------------------------------------------------
# planner


class _Planner:
    def __init__(self, pipeline, cluster, profiles, rates, params, bandwidth, state):
        self.p = pipeline
        self.cluster = cluster
        self.profiles = profiles
        self.rates = rates
        self.params = params
        self.bw = bandwidth
        self.state = state
        self.cycle = pipeline.slo / 2 if params.cycle_capacity else 0.0
        self.budget = pipeline.slo / 2
        self.source_rate = rates[pipeline.source].mean_rate

    # -- helpers
    def dclass(self, device_id: str) -> str:
        return self.cluster.device(device_id).device_class

    def sized(self, m: str, device_id: str, bz: int) -> ModelChoice:
        n = instances_for(
            self.rates[m].mean_rate * self.params.headroom,
            self.profiles[m],
            self.dclass(device_id),
            bz,
            self.cycle,
            self.params.max_instances_per_model,
        )
        return ModelChoice(device_id, bz, n)

    def initial_bz(self, m: str, device_id: str) -> int | None:
        prof = self.profiles[m]
        dc = self.dclass(device_id)
        if not self.params.dynamic_batching:
            return self.params.static.pick(prof, dc, m == self.p.source, device_id == self.cluster.server_id)
        sizes = [b for b in prof.batch_sizes(dc) if b in self.params.bz_set]
        return sizes[0] if sizes else None

    def latency(self, cfg: Config) -> float:
        return est_latency(self.p, cfg, self.cluster, self.profiles, self.bw)

    def throughput(self, cfg: Config) -> float:
        return est_throughput(self.p, cfg, self.cluster, self.profiles, self.source_rate, self.cycle, self.bw)

    def objective(self, cfg: Config) -> tuple[float, int]:
        # more throughput first, then fewer replicas
        return (round(self.throughput(cfg), 9), -sum(c.instances for c in cfg.values()))

    def memory_ok(self, cfg: Config) -> bool:
        need: dict[str, float] = {}
        for m, c in cfg.items():
            prof = self.profiles[m]
            need[c.device_id] = need.get(c.device_id, 0.0) + c.instances * (
                prof.weight_mem + prof.intermediate(c.batch_size)
            )
        for dev, mib in need.items():
            gpus = self.cluster.device(dev).gpus
            if not gpus:
                return False
            cap = sum(g.mem_capacity for g in gpus)
            if self.state.device_mem_used.get(dev, 0.0) + mib > cap:
                return False
        for m, c in cfg.items():
            prof = self.profiles[m]
            one = prof.weight_mem + prof.intermediate(c.batch_size)
            if one > max(g.mem_capacity for g in self.cluster.device(c.device_id).gpus):
                return False
        return True

    def larger_sizes(self, m: str, device_id: str, bz: int) -> list[int]:
        dc = self.dclass(device_id)
        return [b for b in self.profiles[m].batch_sizes(dc) if b > bz and b in self.params.bz_set]

    def fit(self, cfg: Config, m: str, choice: ModelChoice) -> ModelChoice | None:
        """``choice`` with as many of its replicas as memory allows, at least one."""
        for n in range(choice.instances, 0, -1):
            c = ModelChoice(choice.device_id, choice.batch_size, n)
            if self.memory_ok({**cfg, m: c}):
                return c
        return None

    def capacity(self, m: str, c: ModelChoice) -> float:
        return c.instances * instance_capacity(self.profiles[m], self.dclass(c.device_id), c.batch_size, self.cycle)

    def keeping_up(self, m: str, device_id: str, need: float) -> list[ModelChoice]:
        """Per batch size, the fewest replicas (within the cap) that serve ``need`` queries/s."""
        dc = self.dclass(device_id)
        out = []
        for bz in self.profiles[m].batch_sizes(dc):
            if bz not in self.params.bz_set:
                continue
            one = instance_capacity(self.profiles[m], dc, bz, self.cycle)
            n = max(1, math.ceil(need / one - 1e-9))
            if n <= self.params.max_instances_per_model:
                out.append(ModelChoice(device_id, bz, n))
        return out

    # -- batch exploration
    def explore(self, cfg: Config, order: Sequence[str]) -> Config:
        best = self.objective(cfg)
        while True:
            improved = False
            for m in order:
                cur = cfg[m]
                for bz in self.larger_sizes(m, cur.device_id, cur.batch_size):
                    trial = self.sized(m, cur.device_id, bz)
                    trial = self.fit(cfg, m, ModelChoice(trial.device_id, bz, min(trial.instances, cur.instances)))
                    if trial is None:
                        break
                    cand = {**cfg, m: trial}
                    if self.latency(cand) > self.budget:
                        break
                    obj = self.objective(cand)
                    if obj > best:
                        cfg, best, improved = cand, obj, True
                        break
            if not improved:
                cand = self.bottleneck_step(cfg)
                if cand is None or self.objective(cand) <= best:
                    return cfg
                cfg, best = cand, self.objective(cand)

    def bottleneck_step(self, cfg: Config) -> Config | None:
        """Raise the rate of every model tied at the bottleneck at once.

        With cycle-bound capacity, replicas of different models often serve
        the same rate, so growing any one of them alone never helps.  Each
        model then takes the smallest batch that keeps up with the new rate,
        moving to larger batches only where memory demands it.
        """
        fan = self.p.cumulative_fanout(self.profiles)
        caps = {m: self.capacity(m, cfg[m]) / fan[m] for m in self.p.models if fan[m] > 0}
        if not caps:
            return None
        low = min(caps.values())
        grown = sorted(m for m, v in caps.items() if v <= low * (1 + 1e-9))
        cand = dict(cfg)
        for m in grown:
            cur = cfg[m]
            bigger = self.larger_sizes(m, cur.device_id, cur.batch_size)
            if bigger:
                trial = self.sized(m, cur.device_id, bigger[0])
                cand[m] = ModelChoice(cur.device_id, bigger[0], min(trial.instances, cur.instances))
            elif cur.instances < self.params.max_instances_per_model:
                cand[m] = ModelChoice(cur.device_id, cur.batch_size, cur.instances + 1)
            else:
                return None
        target = min([self.source_rate] + [self.capacity(m, cand[m]) / fan[m] for m in grown])
        # every model takes the smallest batch that keeps up with the new rate
        options = {m: self.keeping_up(m, cfg[m].device_id, target * fan[m]) or [cand[m]] for m in caps}
        for m in caps:
            cand[m] = options[m][0]
        # trade latency for memory where the smallest batches do not fit
        for m in caps:
            for c in options[m]:
                cand[m] = c
                if self.memory_ok(cand):
                    break
        if self.latency(cand) > self.budget or not self.memory_ok(cand):
            return None
        return cand

    def search_single(self, cfg: Config, m: str, device_id: str) -> ModelChoice | None:
        """One doubling pass for ``m`` alone on ``device_id``; others fixed."""
        bz = self.initial_bz(m, device_id)
        if bz is None or not self.profiles[m].supports(self.dclass(device_id), bz):
            return None
        choice = self.fit(cfg, m, self.sized(m, device_id, bz))
        if choice is None:
            return None
        cand = {**cfg, m: choice}
        best_cfg, best = (cand, self.objective(cand)) if self.latency(cand) <= self.budget else (None, None)
        if self.params.dynamic_batching:
            for bz in self.larger_sizes(m, device_id, choice.batch_size):
                prev = best_cfg[m] if best_cfg else choice
                trial = self.sized(m, device_id, bz)
                trial = self.fit(cfg, m, ModelChoice(device_id, bz, min(trial.instances, prev.instances)))
                if trial is None:
                    break
                c2 = {**cfg, m: trial}
                if self.latency(c2) > self.budget:
                    if best_cfg is None:
                        continue
                    break
                obj = self.objective(c2)
                if best is None or obj > best:
                    best_cfg, best = c2, obj
        if best_cfg is None:
            # nothing inside the budget: still useful if it shortens an over-budget plan
            cur_lat = self.latency(cfg)
            if cur_lat > self.budget and self.latency(cand) < cur_lat:
                return choice
            return None
        return best_cfg[m]

    def to_edge(self, cfg: Config, m: str) -> Config:
        edge = self.p.source_device
        self.state.visit_log.append((self.p.pipeline_id, m))
        prev = cfg[m]
        moved = False
        edge_dev = self.cluster.devices.get(edge)
        if edge_dev is not None and edge_dev.gpus and not edge_dev.is_server:
            choice = self.search_single(cfg, m, edge)
            if choice is not None:
                cand = {**cfg, m: choice}
                base_lat = self.latency(cfg)
                ok_lat = self.latency(cand) <= self.budget or self.latency(cand) < base_lat
                if ok_lat and self.throughput(cand) >= self.throughput(cfg) - 1e-6:
                    cfg, moved = cand, True
            if not moved and self.latency(cfg) > self.budget:
                ahead = self.look_ahead(cfg, m, edge, choice)
                if ahead is not None:
                    return ahead
            if not moved and self._fits_nowhere(cfg, m, edge):
                moved = None  # out of memory: skip m but keep walking
        if moved is False:
            return cfg
        kids = sorted(self.p.downstream(m), key=lambda k: (self.rates[k].burstiness, k))
        for k in kids:
            cfg = self.to_edge(cfg, k)
        if moved:
            prof, rate = self.profiles[m], self.rates[m]
            kids_on_edge = any(cfg[k].device_id == edge for k in self.p.downstream(m))
            if overhead_in(prof, rate) * self.params.alpha < overhead_out(prof, rate) and not kids_on_edge:
                cfg = {**cfg, m: prev}
        return cfg

    def look_ahead(self, cfg: Config, m: str, edge: str, choice: ModelChoice | None) -> Config | None:
        """Move ``m`` and its subtree together; an over-budget plan may only recover once the children follow."""
        if choice is None:
            bz = self.initial_bz(m, edge)
            if bz is None:
                return None
            choice = self.fit(cfg, m, self.sized(m, edge, bz))
            if choice is None:
                return None
        ahead = {**cfg, m: choice}
        for k in sorted(self.p.downstream(m), key=lambda k: (self.rates[k].burstiness, k)):
            ahead = self.to_edge(ahead, k)
        return ahead if self.latency(ahead) <= self.budget else None

    def _fits_nowhere(self, cfg: Config, m: str, edge: str) -> bool:
        bz = self.initial_bz(m, edge)
        if bz is None:
            return True
        one = ModelChoice(edge, bz, 1)
        return not self.memory_ok({**cfg, m: one})

    def run(self) -> Config:
        server = self.cluster.server_id
        cfg: Config = {}
        for m in self.p.models:
            bz = self.initial_bz(m, server)
            if bz is None:
                raise ValueError(f"{m}: no profiled batch size on {self.dclass(server)}")
            cfg[m] = self.sized(m, server, bz)
        if self.params.dynamic_batching:
            order = sorted(self.p.models, key=lambda m: (-self.rates[m].burstiness, m))
            cfg = self.explore(cfg, order)
        if self.params.edge_allowed:
            cfg = self.to_edge(cfg, self.p.source)
            if self.params.dynamic_batching:
                # placement changed link and memory limits; batches may grow again
                cfg = self.explore(cfg, order)
        return cfg


def exploration_order(pipeline: PipelineSpec, rates: Mapping[str, RateStats]) -> list[str]:
    return sorted(pipeline.models, key=lambda m: (-rates[m].burstiness, m))


def config_to_plan(
    pipeline: PipelineSpec,
    cfg: Mapping[str, ModelChoice],
    cluster: Cluster,
    profiles: Mapping[str, ModelProfile],
    bandwidth,
    source_rate: float,
    cycle_ms: float = 0.0,
) -> PipelinePlan:
    instances = {
        m: [
            InstanceConfig(pipeline.pipeline_id, m, i, c.batch_size, c.device_id)
            for i in range(c.instances)
        ]
        for m, c in cfg.items()
    }
    thr = est_throughput(pipeline, cfg, cluster, profiles, source_rate, cycle_ms, bandwidth)
    return PipelinePlan(
        pipeline.pipeline_id,
        instances,
        est_latency=est_latency(pipeline, cfg, cluster, profiles, bandwidth),
        est_throughput=thr,
        saturated=thr < source_rate - 1e-6,
    )


def cwd_schedule(
    pipelines: Sequence[PipelineSpec],
    cluster: Cluster,
    profiles: Mapping[str, ModelProfile],
    stats: Mapping[str, RateStats],
    params: CwdParams = CwdParams(),
    bandwidth: Mapping[tuple[str, str], float] | None = None,
    state: CwdState | None = None,
) -> list[PipelinePlan]:
    """Plan every pipeline; ``stats`` maps pipeline id to its source RateStats.

    Per-model stats may be supplied as ``stats[(pipeline_id, model_id)]``;
    missing ones are propagated from the source through fanouts.
    """
    bandwidth = bandwidth or {}
    state = state if state is not None else CwdState()
    plans = []
    for pipe in sorted(pipelines, key=lambda p: p.pipeline_id):
        rates = model_rates(pipe, stats[pipe.pipeline_id], profiles)
        for m in pipe.models:
            if (pipe.pipeline_id, m) in stats:
                rates[m] = stats[(pipe.pipeline_id, m)]
            state.rates[(pipe.pipeline_id, m)] = rates[m]
        planner = _Planner(pipe, cluster, profiles, rates, params, bandwidth, state)
        cfg = planner.run()
        state.configs[pipe.pipeline_id] = cfg
        for m, c in cfg.items():
            prof = profiles[m]
            state.device_mem_used[c.device_id] = state.device_mem_used.get(c.device_id, 0.0) + c.instances * (
                prof.weight_mem + prof.intermediate(c.batch_size)
            )
        plans.append(
            config_to_plan(pipe, cfg, cluster, profiles, bandwidth, rates[pipe.source].mean_rate, planner.cycle)
        )
    return plans

