"""Core data model and latency / resource arithmetic.

Units are fixed across the package: milliseconds for time, mebibytes (MiB)
for GPU memory, bytes for payload sizes and bytes/second for bandwidth.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

DEFAULT_BZ: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
# Same-device "bandwidth" (bytes/s); large enough that the IO term vanishes.
DEFAULT_INTRA_BW = 10e9

SERVER_GPU = "server_gpu"
EDGE_AGX = "edge_agx"
EDGE_NX = "edge_nx"
EDGE_ORIN_NANO = "edge_orin_nano"


class MissingProfileError(KeyError):
    """No profiled latency for a (device_class, batch_size) pair."""


class ScenarioError(ValueError):
    """Raised when scenario objects fail structural validation."""


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True, eq=False)
class ModelProfile:
    model_id: str
    weight_mem: float
    intermediate_mem: Mapping[int, float]
    batch_latency: Mapping[tuple[str, int], float]
    utilization: Mapping[tuple[str, int], float]
    in_size: float
    out_size_per_result: float
    fanout: float = 1.0

    def __post_init__(self):
        if self.weight_mem <= 0 or self.in_size <= 0 or self.out_size_per_result <= 0:
            raise ScenarioError(f"{self.model_id}: memory and payload sizes must be > 0")
        if self.fanout < 0:
            raise ScenarioError(f"{self.model_id}: fanout must be >= 0")
        for bz, mem in self.intermediate_mem.items():
            if not _is_pow2(bz) or mem <= 0:
                raise ScenarioError(f"{self.model_id}: bad intermediate entry {bz}: {mem}")
        for (dc, bz), lat in self.batch_latency.items():
            if not _is_pow2(bz) or lat <= 0:
                raise ScenarioError(f"{self.model_id}: bad latency entry {dc}/{bz}")
            u = self.utilization.get((dc, bz))
            if u is None or not 0 < u <= 1:
                raise ScenarioError(f"{self.model_id}: utilization for {dc}/{bz} must be in (0, 1]")
        for dc in self.device_classes():
            lats = [self.batch_latency[(dc, b)] for b in self.batch_sizes(dc)]
            if any(b < a for a, b in zip(lats, lats[1:])):
                raise ScenarioError(f"{self.model_id}: latency not monotone in batch size on {dc}")

    def device_classes(self) -> list[str]:
        return sorted({dc for dc, _ in self.batch_latency})

    def batch_sizes(self, device_class: str) -> list[int]:
        return sorted(bz for dc, bz in self.batch_latency if dc == device_class)

    def supports(self, device_class: str, bz: int) -> bool:
        return (device_class, bz) in self.batch_latency

    def latency(self, device_class: str, bz: int) -> float:
        try:
            return self.batch_latency[(device_class, bz)]
        except KeyError:
            raise MissingProfileError(f"{self.model_id}: no latency for {device_class} bz={bz}") from None

    def util(self, device_class: str, bz: int) -> float:
        try:
            return self.utilization[(device_class, bz)]
        except KeyError:
            raise MissingProfileError(f"{self.model_id}: no utilization for {device_class} bz={bz}") from None

    def intermediate(self, bz: int) -> float:
        """Intermediate buffer size for a batch; linear extrapolation off-table."""
        if bz in self.intermediate_mem:
            return self.intermediate_mem[bz]
        base = min(self.intermediate_mem)
        return self.intermediate_mem[base] * bz / base

    def latency_for_count(self, device_class: str, n: int) -> float:
        """Latency of a (possibly partial) batch of ``n`` queries.

        Uses the smallest profiled batch size that holds ``n``.
        """
        sizes = self.batch_sizes(device_class)
        for bz in sizes:
            if bz >= n:
                return self.batch_latency[(device_class, bz)]
        return self.batch_latency[(device_class, sizes[-1])]


@dataclass(frozen=True)
class PipelineSpec:
    pipeline_id: str
    dag: Mapping[str, tuple[str, ...]]
    slo: float
    source_device: str

    def __post_init__(self):
        if self.slo <= 0:
            raise ScenarioError(f"{self.pipeline_id}: slo must be > 0")
        dag = {m: tuple(ch) for m, ch in self.dag.items()}
        for ch in list(dag.values()):
            for c in ch:
                dag.setdefault(c, ())
        object.__setattr__(self, "dag", dag)
        parents: dict[str, list[str]] = defaultdict(list)
        for m, ch in dag.items():
            for c in ch:
                parents[c].append(m)
        roots = [m for m in dag if not parents[m]]
        if len(roots) != 1:
            raise ScenarioError(f"{self.pipeline_id}: dag needs exactly one source, got {roots}")
        multi = [m for m, p in parents.items() if len(p) > 1]
        if multi:
            raise ScenarioError(f"{self.pipeline_id}: models with several upstreams unsupported: {multi}")
        object.__setattr__(self, "_parent", {m: p[0] for m, p in parents.items() if p})
        object.__setattr__(self, "_source", roots[0])
        # BFS order doubles as the acyclicity check
        order, frontier, seen = [], [roots[0]], set()
        while frontier:
            nxt = []
            for m in frontier:
                if m in seen:
                    raise ScenarioError(f"{self.pipeline_id}: dag has a cycle at {m}")
                seen.add(m)
                order.append(m)
                nxt.extend(sorted(dag[m]))
            frontier = nxt
        if len(order) != len(dag):
            raise ScenarioError(f"{self.pipeline_id}: dag has a cycle")
        object.__setattr__(self, "_order", tuple(order))

    @property
    def source(self) -> str:
        return self._source

    @property
    def models(self) -> tuple[str, ...]:
        """Models in topological (BFS, then id) order."""
        return self._order

    def upstream(self, model_id: str) -> str | None:
        return self._parent.get(model_id)

    def downstream(self, model_id: str) -> tuple[str, ...]:
        return self.dag[model_id]

    def depth(self, model_id: str) -> int:
        d = 0
        while (model_id := self.upstream(model_id)) is not None:
            d += 1
        return d

    def cumulative_fanout(self, profiles: Mapping[str, ModelProfile]) -> dict[str, float]:
        """Expected queries reaching each model per source query."""
        out = {self.source: 1.0}
        for m in self.models[1:]:
            up = self.upstream(m)
            out[m] = out[up] * profiles[up].fanout
        return out

    def sinks(self) -> list[str]:
        return [m for m in self.models if not self.dag[m]]


@dataclass(frozen=True)
class GpuSpec:
    gpu_id: str
    mem_capacity: float
    max_util: float = 1.0
    stream_count: int = 2

    def __post_init__(self):
        if self.mem_capacity <= 0:
            raise ScenarioError(f"{self.gpu_id}: mem_capacity must be > 0")
        if not 0 < self.max_util <= 1:
            raise ScenarioError(f"{self.gpu_id}: max_util must be in (0, 1]")
        if self.stream_count < 1:
            raise ScenarioError(f"{self.gpu_id}: stream_count must be >= 1")


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    device_class: str
    gpus: tuple[GpuSpec, ...] = ()
    intra_bw: float = DEFAULT_INTRA_BW

    @property
    def is_server(self) -> bool:
        return self.device_class == SERVER_GPU


@dataclass(frozen=True)
class Cluster:
    devices: Mapping[str, DeviceSpec]
    server_id: str

    def __post_init__(self):
        if self.server_id not in self.devices:
            raise ScenarioError(f"server {self.server_id!r} is not a known device")
        seen = set()
        for d in self.devices.values():
            for g in d.gpus:
                if g.gpu_id in seen:
                    raise ScenarioError(f"duplicate gpu id {g.gpu_id}")
                seen.add(g.gpu_id)

    @property
    def server(self) -> DeviceSpec:
        return self.devices[self.server_id]

    def device(self, device_id: str) -> DeviceSpec:
        return self.devices[device_id]

    def gpu(self, gpu_id: str) -> GpuSpec:
        for d in self.devices.values():
            for g in d.gpus:
                if g.gpu_id == gpu_id:
                    return g
        raise KeyError(gpu_id)

    def gpu_device(self, gpu_id: str) -> DeviceSpec:
        for d in self.devices.values():
            if any(g.gpu_id == gpu_id for g in d.gpus):
                return d
        raise KeyError(gpu_id)

    def all_gpus(self) -> list[tuple[DeviceSpec, GpuSpec]]:
        return [(d, g) for d in self.devices.values() for g in d.gpus]


def link_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def link_bandwidth(cluster: Cluster, bandwidth: Mapping[tuple[str, str], float], a: str, b: str) -> float:
    """Bytes/s between two devices; the device's own bus for ``a == b``.

    Missing cross-device links read as 0 (no connectivity).
    """
    if a == b:
        return cluster.device(a).intra_bw
    return bandwidth.get(link_key(a, b), 0.0)


@dataclass(frozen=True)
class InstanceConfig:
    pipeline_id: str
    model_id: str
    instance_number: int
    batch_size: int
    device_id: str
    gpu_id: str | None = None
    stream_id: str | None = None
    start_time_in_cycle: float | None = None
    duty_cycle: float | None = None
    portion_length: float | None = None
    clone: bool = False

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.pipeline_id, self.model_id, self.instance_number)

    @property
    def temporal(self) -> bool:
        return self.stream_id is not None

    def with_(self, **kw) -> "InstanceConfig":
        return replace(self, **kw)


@dataclass
class PipelinePlan:
    pipeline_id: str
    instances: dict[str, list[InstanceConfig]]
    est_latency: float = math.nan
    est_throughput: float = 0.0
    saturated: bool = False
    unplaced: list[InstanceConfig] = field(default_factory=list)

    def all_instances(self) -> list[InstanceConfig]:
        return [r for rs in self.instances.values() for r in rs]

    def device_of(self, model_id: str) -> str | None:
        rs = self.instances.get(model_id)
        return rs[0].device_id if rs else None


def avg_query_latency(profile: ModelProfile, bz: int, device_class: str, bw: float) -> float:
    """Per-query latency: batch latency shared across the batch plus input transfer.

    ``bw`` is the bandwidth from the upstream's device (the device bus when
    co-located).  Returns ``math.inf`` for a dead link.
    """
    infer = profile.latency(device_class, bz) / bz
    if bw <= 0:
        return math.inf
    return infer + profile.in_size / bw * 1000.0


def _instance_links(plan: PipelinePlan, pipeline: PipelineSpec, model_id: str) -> list[str]:
    up = pipeline.upstream(model_id)
    if up is None:
        return [pipeline.source_device]
    devs = sorted({r.device_id for r in plan.instances.get(up, [])})
    return devs or [pipeline.source_device]


def model_worst_latency(plan, pipeline, cluster, profiles, bandwidth, model_id) -> float:
    worst = 0.0
    prof = profiles[model_id]
    for r in plan.instances.get(model_id, []):
        dc = cluster.device(r.device_id).device_class
        for src in _instance_links(plan, pipeline, model_id):
            bw = link_bandwidth(cluster, bandwidth, src, r.device_id)
            worst = max(worst, avg_query_latency(prof, r.batch_size, dc, bw) * r.batch_size)
    return worst


def worst_case_pipeline_latency(
    plan: PipelinePlan,
    pipeline: PipelineSpec,
    cluster: Cluster,
    profiles: Mapping[str, ModelProfile],
    bandwidth: Mapping[tuple[str, str], float],
) -> float:
    """Sum over models of per-query latency times batch size.

    The first query of a batch waits for the whole batch; that is the
    SLO-relevant bound.  Models without instances are skipped; a dead link
    yields ``math.inf``.
    """
    return sum(
        model_worst_latency(plan, pipeline, cluster, profiles, bandwidth, m)
        for m in pipeline.models
        if plan.instances.get(m)
    )


def average_pipeline_latency(plan, pipeline, cluster, profiles, bandwidth) -> float:
    total = 0.0
    for m in pipeline.models:
        rs = plan.instances.get(m)
        if not rs:
            continue
        total += model_worst_latency(plan, pipeline, cluster, profiles, bandwidth, m) / max(
            r.batch_size for r in rs
        )
    return total


def pipeline_goodput(latency_ms: float) -> float:
    """Reciprocal-latency goodput in 1/s; zero for unbounded latency."""
    if not math.isfinite(latency_ms) or latency_ms <= 0:
        return 0.0
    return 1000.0 / latency_ms


def system_goodput(latencies_ms: Iterable[float]) -> float:
    return sum(pipeline_goodput(x) for x in latencies_ms)


# ---------------------------------------------------------------------------
# GPU accounting shared by validation, CORAL and the simulator.


def peak_concurrent_width(portions: Iterable[tuple[float, float, float]]) -> float:
    """Max over time of the summed width of overlapping [start, end) intervals."""
    events = []
    for s, e, w in portions:
        if e > s:
            events.append((s, 1, w))
            events.append((e, 0, w))
    # ends sort before starts at the same instant (half-open intervals)
    events.sort(key=lambda x: (x[0], x[1]))
    cur = best = 0.0
    for _, kind, w in events:
        cur = cur + w if kind else cur - w
        best = max(best, cur)
    return best


def gpu_utilization(instances: Iterable[InstanceConfig], widths: Mapping[tuple, float]) -> float:
    """Utilization bound for one GPU.

    Temporal instances are grouped by duty cycle; within a group the bound is
    the pointwise peak of concurrently active widths (groups share a time
    origin), and group peaks add because different periods drift in phase.
    Instances without a portion may run at any time, so their widths add.
    """
    groups: dict[float, list[tuple[float, float, float]]] = defaultdict(list)
    total = 0.0
    for r in instances:
        w = widths[r.key]
        if r.temporal:
            groups[r.duty_cycle].append((r.start_time_in_cycle, r.start_time_in_cycle + r.portion_length, w))
        else:
            total += w
    return total + sum(peak_concurrent_width(v) for v in groups.values())


def gpu_memory(instances: Iterable[InstanceConfig], profiles: Mapping[str, ModelProfile]) -> float:
    """Weights of every resident instance plus intermediate buffers.

    Instances on one stream run one at a time and share a buffer sized to the
    largest of them; an instance without a stream owns its buffer.
    """
    weights = 0.0
    per_stream: dict[str, float] = {}
    loose = 0.0
    for r in instances:
        prof = profiles[r.model_id]
        weights += prof.weight_mem
        inter = prof.intermediate(r.batch_size)
        if r.stream_id is not None:
            per_stream[r.stream_id] = max(per_stream.get(r.stream_id, 0.0), inter)
        else:
            loose += inter
    return weights + loose + sum(per_stream.values())


@dataclass(frozen=True)
class Violation:
    constraint: str  # "slo" | "memory" | "utilization"
    subject: str  # pipeline id or gpu id
    margin: float  # amount over the limit (positive)


def validate_plan(
    plans: PipelinePlan | Sequence[PipelinePlan],
    pipelines: Mapping[str, PipelineSpec],
    cluster: Cluster,
    profiles: Mapping[str, ModelProfile],
    bandwidth: Mapping[tuple[str, str], float],
) -> list[Violation]:
    """Check latency, memory and compute constraints; violations are data."""
    if isinstance(plans, PipelinePlan):
        plans = [plans]
    out: list[Violation] = []
    by_gpu: dict[str, list[InstanceConfig]] = defaultdict(list)
    for plan in sorted(plans, key=lambda p: p.pipeline_id):
        pipe = pipelines[plan.pipeline_id]
        lat = worst_case_pipeline_latency(plan, pipe, cluster, profiles, bandwidth)
        if lat > pipe.slo:
            out.append(Violation("slo", plan.pipeline_id, lat - pipe.slo))
        for r in plan.all_instances():
            if r.gpu_id is not None:
                by_gpu[r.gpu_id].append(r)
    for gpu_id in sorted(by_gpu):
        rs = by_gpu[gpu_id]
        gpu = cluster.gpu(gpu_id)
        dc = cluster.gpu_device(gpu_id).device_class
        mem = gpu_memory(rs, profiles)
        if mem > gpu.mem_capacity:
            out.append(Violation("memory", gpu_id, mem - gpu.mem_capacity))
        widths = {r.key: profiles[r.model_id].util(dc, r.batch_size) for r in rs}
        util = gpu_utilization(rs, widths)
        if util > gpu.max_util + 1e-9:
            out.append(Violation("utilization", gpu_id, util - gpu.max_util))
    return out


# ---------------------------------------------------------------------------
# Profile tables

LATENCY_HEADER = ["model_id", "device_class", "batch_size", "latency_ms", "util", "intermediate_mib"]
MODEL_HEADER = ["model_id", "weight_mib", "in_bytes", "out_bytes", "fanout"]


def _read_rows(path: Path, header: list[str]) -> list[tuple[int, dict[str, str]]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [h.strip() for h in reader.fieldnames] != header:
            raise ScenarioError(f"{path}: expected header {','.join(header)}")
        return [(i + 2, row) for i, row in enumerate(reader)]


def load_profiles(latency_csv: str | Path, models_csv: str | Path) -> dict[str, ModelProfile]:
    lat: dict[str, dict] = defaultdict(dict)
    util: dict[str, dict] = defaultdict(dict)
    inter: dict[str, dict] = defaultdict(dict)
    for line, row in _read_rows(Path(latency_csv), LATENCY_HEADER):
        try:
            m, dc, bz = row["model_id"], row["device_class"], int(row["batch_size"])
            lat[m][(dc, bz)] = float(row["latency_ms"])
            util[m][(dc, bz)] = float(row["util"])
            inter[m][bz] = max(inter[m].get(bz, 0.0), float(row["intermediate_mib"]))
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"{latency_csv}:{line}: {exc}") from None
    profiles = {}
    for line, row in _read_rows(Path(models_csv), MODEL_HEADER):
        m = row["model_id"]
        if m not in lat:
            raise ScenarioError(f"{models_csv}:{line}: model {m!r} has no latency rows")
        try:
            profiles[m] = ModelProfile(
                model_id=m,
                weight_mem=float(row["weight_mib"]),
                intermediate_mem=dict(inter[m]),
                batch_latency=dict(lat[m]),
                utilization=dict(util[m]),
                in_size=float(row["in_bytes"]),
                out_size_per_result=float(row["out_bytes"]),
                fanout=float(row["fanout"]),
            )
        except ValueError as exc:
            raise ScenarioError(f"{models_csv}:{line}: {exc}") from None
    return profiles


def write_profiles(profiles: Mapping[str, ModelProfile], latency_csv: str | Path, models_csv: str | Path) -> None:
    with open(latency_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LATENCY_HEADER)
        for m in sorted(profiles):
            p = profiles[m]
            for dc, bz in sorted(p.batch_latency):
                w.writerow([m, dc, bz, p.batch_latency[(dc, bz)], p.utilization[(dc, bz)], p.intermediate(bz)])
    with open(models_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MODEL_HEADER)
        for m in sorted(profiles):
            p = profiles[m]
            w.writerow([m, p.weight_mem, p.in_size, p.out_size_per_result, p.fanout])
