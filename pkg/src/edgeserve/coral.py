"""Spatiotemporal co-location scheduling on inference streams.

Every GPU exposes a fixed number of streams.  A stream repeats with a duty
cycle (half the SLO of the pipeline that first lands on it) and holds
non-overlapping portions, one per resident instance; a portion's length is
the batch latency and its width the instance's GPU utilization.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .domain import (
    Cluster,
    InstanceConfig,
    ModelProfile,
    PipelinePlan,
    PipelineSpec,
    gpu_utilization,
    link_bandwidth,
)

_TOL = 1e-9


class SequencingError(RuntimeError):
    """An instance was scheduled before any instance of its upstream."""


@dataclass(frozen=True)
class Portion:
    stream_id: str
    start: float
    end: float
    width: float = 0.0

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError(f"empty portion [{self.start}, {self.end})")

    @property
    def length(self) -> float:
        return self.end - self.start

    def contains(self, start: float, end: float) -> bool:
        return self.start <= start + _TOL and end <= self.end + _TOL


def divide_portion(pt: Portion, start: float, end: float, width: float = 0.0) -> tuple[Portion, list[Portion]]:
    """Split ``pt`` into the selected [start, end) and the 0-2 leftover pieces."""
    if not pt.contains(start, end) or not end > start:
        raise ValueError(f"[{start}, {end}) is not inside [{pt.start}, {pt.end})")
    start, end = max(start, pt.start), min(end, pt.end)
    freed = []
    if start > pt.start:
        freed.append(Portion(pt.stream_id, pt.start, start))
    if end < pt.end:
        freed.append(Portion(pt.stream_id, end, pt.end))
    return Portion(pt.stream_id, start, end, width), freed


@dataclass
class Stream:
    stream_id: str
    gpu_id: str
    index: int
    duty_cycle: float = 0.0
    assigned: list[tuple[InstanceConfig, Portion]] = field(default_factory=list)
    peak_intermediate: float = 0.0


@dataclass
class GpuState:
    gpu_id: str
    device_id: str
    device_class: str
    mem_capacity: float
    max_util: float
    streams: list[Stream]
    weights: float = 0.0
    intermediate: float = 0.0
    util: float = 0.0


@dataclass
class Placement:
    """Outcome of one placement attempt."""

    instance: InstanceConfig
    portion: Portion | None
    reason: str = ""

    @property
    def found(self) -> bool:
        return self.portion is not None


class CoralState:
    """Single-writer scheduler state: streams, free-portion lists, GPU tallies."""

    def __init__(self, cluster: Cluster, profiles: Mapping[str, ModelProfile]):
        self.cluster = cluster
        self.profiles = profiles
        self.gpus: dict[str, GpuState] = {}
        self.streams: dict[str, Stream] = {}
        self.free: dict[str, list[Portion]] = {}
        self.placed: dict[tuple, InstanceConfig] = {}
        self.widths: dict[tuple, float] = {}
        for dev in cluster.devices.values():
            self.free[dev.device_id] = []
            for g in dev.gpus:
                streams = []
                for k in range(g.stream_count):
                    s = Stream(f"{g.gpu_id}/s{k}", g.gpu_id, k)
                    streams.append(s)
                    self.streams[s.stream_id] = s
                    self.free[dev.device_id].append(Portion(s.stream_id, 0.0, math.inf))
                self.gpus[g.gpu_id] = GpuState(
                    g.gpu_id, dev.device_id, dev.device_class, g.mem_capacity, g.max_util, streams
                )
            self._sort(dev.device_id)

    # -- list upkeep
    def _order_key(self, pt: Portion):
        s = self.streams[pt.stream_id]
        return (s.gpu_id, s.index, pt.start)

    def _sort(self, device_id: str) -> None:
        self.free[device_id].sort(key=self._order_key)

    def free_portions(self, device_id: str) -> list[Portion]:
        return list(self.free[device_id])

    def instances_on(self, gpu_id: str) -> list[InstanceConfig]:
        return [r for s in self.gpus[gpu_id].streams for r, _ in s.assigned]

    # -- accounting
    def _stream_peak(self, stream: Stream) -> float:
        return max(
            (self.profiles[r.model_id].intermediate(r.batch_size) for r, _ in stream.assigned),
            default=0.0,
        )

    def _recount(self, gpu_id: str) -> None:
        g = self.gpus[gpu_id]
        rs = self.instances_on(gpu_id)
        for s in g.streams:
            s.peak_intermediate = self._stream_peak(s)
        g.weights = sum(self.profiles[r.model_id].weight_mem for r in rs)
        g.intermediate = sum(s.peak_intermediate for s in g.streams)
        g.util = gpu_utilization(rs, self.widths)

    def gpu_memory_used(self, gpu_id: str) -> float:
        g = self.gpus[gpu_id]
        return g.weights + g.intermediate

    # -- core placement
    def evaluate(
        self, instance: InstanceConfig, m_start: float, duty_cycle: float
    ) -> tuple[Portion, float, float] | None:
        """Best-fit free portion for ``instance`` (no mutation).

        Returns (free portion, chosen start, effective duty cycle).
        """
        prof = self.profiles[instance.model_id]
        best = None
        best_key = None
        for idx, pt in enumerate(self.free[instance.device_id]):
            s = self.streams[pt.stream_id]
            g = self.gpus[s.gpu_id]
            dclass = g.device_class
            if not prof.supports(dclass, instance.batch_size):
                continue
            # condition 3: the instance's cycle must not shorten below the stream's
            if s.duty_cycle and duty_cycle + _TOL < s.duty_cycle:
                continue
            eff_dc = s.duty_cycle or duty_cycle
            length = prof.latency(dclass, instance.batch_size)
            pt_end = min(pt.end, eff_dc)
            start = max(pt.start, m_start)
            # condition 1: the free portion fully holds the execution
            if start + length > pt_end + _TOL:
                continue
            # condition 2: memory and compute on the GPU
            w_g = g.weights + prof.weight_mem
            i_m = prof.intermediate(instance.batch_size)
            i_g = g.intermediate - s.peak_intermediate + max(s.peak_intermediate, i_m)
            if w_g + i_g > g.mem_capacity + _TOL:
                continue
            width = prof.util(dclass, instance.batch_size)
            cand = instance.with_(
                gpu_id=g.gpu_id,
                stream_id=s.stream_id,
                start_time_in_cycle=start,
                duty_cycle=eff_dc,
                portion_length=length,
            )
            widths = dict(self.widths)
            widths[cand.key] = width
            u_g = gpu_utilization(self.instances_on(g.gpu_id) + [cand], widths)
            if u_g > g.max_util + _TOL:
                continue
            key = (pt_end - pt.start - length, start - pt.start, idx)
            if best_key is None or key < best_key:
                best, best_key = (pt, start, eff_dc), key
        return best

    def place(self, instance: InstanceConfig, m_start: float, duty_cycle: float) -> Placement:
        found = self.evaluate(instance, m_start, duty_cycle)
        if found is None:
            return Placement(instance, None, "not found")
        pt, start, eff_dc = found
        s = self.streams[pt.stream_id]
        g = self.gpus[s.gpu_id]
        prof = self.profiles[instance.model_id]
        length = prof.latency(g.device_class, instance.batch_size)
        width = prof.util(g.device_class, instance.batch_size)
        free = self.free[g.device_id]
        free.remove(pt)
        if not s.duty_cycle:
            s.duty_cycle = eff_dc
            pt = Portion(pt.stream_id, pt.start, min(pt.end, eff_dc))
        selected, freed = divide_portion(pt, start, start + length, width)
        free.extend(freed)
        self._sort(g.device_id)
        placed = instance.with_(
            gpu_id=g.gpu_id,
            stream_id=s.stream_id,
            start_time_in_cycle=selected.start,
            duty_cycle=s.duty_cycle,
            portion_length=length,
        )
        s.assigned.append((placed, selected))
        s.assigned.sort(key=lambda a: a[1].start)
        self.placed[placed.key] = placed
        self.widths[placed.key] = width
        self._recount(g.gpu_id)
        return Placement(placed, selected)

    def remove(self, key: tuple) -> Portion:
        """Reclaim an instance's portion into the free list."""
        r = self.placed.pop(key)
        self.widths.pop(key)
        s = self.streams[r.stream_id]
        g = self.gpus[s.gpu_id]
        idx = next(i for i, (a, _) in enumerate(s.assigned) if a.key == key)
        _, portion = s.assigned.pop(idx)
        free = self.free[g.device_id]
        if not s.assigned:
            free[:] = [p for p in free if p.stream_id != s.stream_id]
            s.duty_cycle = 0.0
            free.append(Portion(s.stream_id, 0.0, math.inf))
        else:
            lo, hi = portion.start, portion.end
            keep = []
            for p in free:
                if p.stream_id == s.stream_id and abs(p.end - lo) <= _TOL:
                    lo = p.start
                elif p.stream_id == s.stream_id and abs(p.start - hi) <= _TOL:
                    hi = p.end
                else:
                    keep.append(p)
            keep.append(Portion(s.stream_id, lo, hi))
            free[:] = keep
        self._sort(g.device_id)
        self._recount(g.gpu_id)
        return portion

    # -- reporting
    def free_time(self, stream_id: str) -> float:
        s = self.streams[stream_id]
        if not s.duty_cycle:
            return math.inf
        dev = self.gpus[s.gpu_id].device_id
        return sum(p.length for p in self.free[dev] if p.stream_id == stream_id)

    def snapshot(self) -> dict:
        out = {}
        for gid in sorted(self.gpus):
            g = self.gpus[gid]
            out[gid] = {
                "device": g.device_id,
                "memory_mib": self.gpu_memory_used(gid),
                "utilization": g.util,
                "streams": {
                    s.stream_id: {
                        "duty_cycle_ms": s.duty_cycle,
                        "portions": [
                            {
                                "instance": "/".join(map(str, r.key)),
                                "start_ms": p.start,
                                "end_ms": p.end,
                                "width": p.width,
                            }
                            for r, p in s.assigned
                        ],
                    }
                    for s in g.streams
                },
            }
        return out


def portion_geometry(
    instance: InstanceConfig,
    pipeline: PipelineSpec,
    cluster: Cluster,
    profiles: Mapping[str, ModelProfile],
    upstream: InstanceConfig | None,
    bandwidth: Mapping[tuple[str, str], float],
) -> tuple[float, float, float]:
    """(earliest start, end, width) of an instance's portion within the cycle.

    Starts when the upstream's portion ends plus the transfer of one batch of
    inputs across devices; co-located hand-offs are free.
    """
    prof = profiles[instance.model_id]
    dclass = cluster.device(instance.device_id).device_class
    length = prof.latency(dclass, instance.batch_size)
    width = prof.util(dclass, instance.batch_size)
    if pipeline.upstream(instance.model_id) is None:
        m_start = 0.0
    else:
        if upstream is None or upstream.start_time_in_cycle is None:
            raise SequencingError(f"{instance.key}: upstream not placed")
        m_start = upstream.start_time_in_cycle + upstream.portion_length
        if upstream.device_id != instance.device_id:
            bw = link_bandwidth(cluster, bandwidth, upstream.device_id, instance.device_id)
            m_start += math.inf if bw <= 0 else instance.batch_size * prof.in_size / bw * 1000.0
    return m_start, m_start + length, width


def coral_place(state: CoralState, instance: InstanceConfig, m_start: float, duty_cycle: float) -> Placement:
    return state.place(instance, m_start, duty_cycle)


@dataclass
class CoralResult:
    plans: list[PipelinePlan]
    unplaced: list[Placement]
    state: CoralState
    rounds: list[list[Placement]]

    def report(self) -> dict:
        return {
            "gpus": self.state.snapshot(),
            "unplaced": ["/".join(map(str, p.instance.key)) + f": {p.reason}" for p in self.unplaced],
        }

    def report_json(self) -> str:
        return json.dumps(self.report(), indent=2, sort_keys=True)


def upstream_reference(
    placed: Mapping[tuple, InstanceConfig], pipeline: PipelineSpec, r: InstanceConfig
) -> InstanceConfig | None:
    up = pipeline.upstream(r.model_id)
    if up is None:
        return None
    same = placed.get((r.pipeline_id, up, r.instance_number))
    if same is not None:
        return same
    cands = [x for k, x in placed.items() if k[0] == r.pipeline_id and k[1] == up]
    if not cands:
        return None
    return min(cands, key=lambda x: (x.start_time_in_cycle + x.portion_length, x.instance_number))


def coral_schedule(
    plans: Sequence[PipelinePlan],
    pipelines: Mapping[str, PipelineSpec],
    cluster: Cluster,
    profiles: Mapping[str, ModelProfile],
    bandwidth: Mapping[tuple[str, str], float] | None = None,
    state: CoralState | None = None,
) -> CoralResult:
    """Place every planned instance, one instance per model per round."""
    bandwidth = bandwidth or {}
    state = state or CoralState(cluster, profiles)
    unplaced: list[Placement] = []
    rounds: list[list[Placement]] = []
    top = max((len(rs) for p in plans for rs in p.instances.values()), default=0)
    for k in range(top):
        this_round = []
        for plan in plans:
            pipe = pipelines[plan.pipeline_id]
            for m in pipe.models:
                rs = plan.instances.get(m, [])
                if k >= len(rs):
                    continue
                r = rs[k]
                try:
                    up = upstream_reference(state.placed, pipe, r)
                    m_start, _, _ = portion_geometry(r, pipe, cluster, profiles, up, bandwidth)
                except SequencingError as exc:
                    res = Placement(r, None, str(exc))
                else:
                    res = state.place(r, m_start, pipe.slo / 2)
                this_round.append(res)
                if not res.found:
                    unplaced.append(res)
        rounds.append(this_round)
    out = []
    for plan in plans:
        insts = {
            m: [state.placed[r.key] for r in rs if r.key in state.placed]
            for m, rs in plan.instances.items()
        }
        out.append(
            PipelinePlan(
                plan.pipeline_id,
                insts,
                est_latency=plan.est_latency,
                est_throughput=plan.est_throughput,
                saturated=plan.saturated or any(len(insts[m]) < len(plan.instances[m]) for m in insts),
                unplaced=[u.instance for u in unplaced if u.instance.pipeline_id == plan.pipeline_id],
            )
        )
    return CoralResult(out, unplaced, state, rounds)

