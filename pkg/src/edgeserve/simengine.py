"""Deterministic discrete-event simulation of placed pipelines.

Events are ordered by ``(time, sequence)``.  Queries enter at their
pipeline's source device, flow through per-instance queues, are batched,
executed on GPUs (with optional proportional interference), fan out to
downstream models and are counted when they leave a sink model.
"""
from __future__ import annotations

import heapq
import json
import logging
import math
import time as _time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autoscaler
from .domain import InstanceConfig, PipelinePlan, gpu_memory, link_key
from .policies import RoundContext, RoundResult, SchedulingPolicy
from .scenario import Scenario
from .traces import BandwidthTrace, bandwidth_at, mean_bandwidth, rate_stats, transfer_finish

log = logging.getLogger(__name__)

# event kinds
ARRIVAL = "arrival"
BATCH_DISPATCH = "batch_dispatch"
BATCH_COMPLETE = "batch_complete"
TRANSFER_COMPLETE = "transfer_complete"
SCHEDULER_ROUND = "scheduler_round"
SCALER_TICK = "scaler_tick"
BATCH_TIMEOUT = "batch_timeout"
SAMPLE = "sample"

KEEP = "keep"
DROP = "drop"

_TOL = 1e-9
HIST_BIN_MS = 10.0
REPORT_SCHEMA = 1


class SimulationError(RuntimeError):
    pass


class Task:
    """One unit of work for one model; a source query spawns a tree of these."""

    __slots__ = ("query_id", "pipeline_id", "model_id", "birth", "deadline", "stamp")

    def __init__(self, query_id: int, pipeline_id: str, model_id: str, birth: float, deadline: float, stamp: float):
        self.query_id = query_id
        self.pipeline_id = pipeline_id
        self.model_id = model_id
        self.birth = birth
        self.deadline = deadline
        self.stamp = stamp

    def advance(self, now: float) -> None:
        if now < self.stamp - _TOL:
            raise SimulationError(f"query {self.query_id}: time went backwards ({now} < {self.stamp})")
        self.stamp = now


@dataclass(frozen=True)
class InterferenceModel:
    mode: str = "proportional"

    def factor(self, concurrent_width: float, max_util: float) -> float:
        if self.mode == "none" or concurrent_width <= max_util + _TOL:
            return 1.0
        return concurrent_width / max_util


def interfere(model: InterferenceModel, concurrent_width: float, max_util: float, latency: float) -> float:
    """Batch latency after co-location inflation."""
    return latency * model.factor(concurrent_width, max_util)


def drop_policy(task: Task, now: float) -> str:
    return DROP if now > task.deadline else KEEP


def batch_collect(queue: deque, batch_size: int, now: float, lazy_drop: bool = False) -> tuple[list, list]:
    """Pop up to ``batch_size`` tasks; late ones are dropped when ``lazy_drop``."""
    batch, dropped = [], []
    while queue and len(batch) < batch_size:
        t = queue.popleft()
        if lazy_drop and drop_policy(t, now) == DROP:
            dropped.append(t)
        else:
            batch.append(t)
    return batch, dropped


def transfer(nbytes: float, start: float, trace: BandwidthTrace | None, constant_bps: float = math.inf) -> float:
    """Arrival time of ``nbytes`` sent at ``start``; stalls while bandwidth is 0."""
    return transfer_finish(trace, start, nbytes, constant_bps)


class _Link:
    """One direction of a device link; transfers are serialized FIFO."""

    __slots__ = ("trace", "busy_until")

    def __init__(self, trace: BandwidthTrace | None):
        self.trace = trace
        self.busy_until = 0.0

    def send(self, now: float, nbytes: float) -> float:
        start = max(now, self.busy_until)
        if self.trace is None:
            done = math.inf
        else:
            done = transfer(nbytes, start, self.trace)
        self.busy_until = done
        return done


class _Worker:
    __slots__ = (
        "cfg", "key", "prof", "dc", "gpu_id", "max_util", "width", "queue", "busy_until",
        "dispatch_pending", "timeout_at", "alive", "busy_ms", "arrived", "low_since",
        "inbound", "epoch", "slack", "capacity",
    )

    def __init__(self, cfg: InstanceConfig, sim: "_Simulation", epoch: float, slack: float):
        self.cfg = cfg
        self.key = cfg.key
        self.prof = sim.sc.profiles[cfg.model_id]
        self.dc = sim.sc.cluster.device(cfg.device_id).device_class
        self.gpu_id = cfg.gpu_id
        self.max_util = sim.sc.cluster.gpu(cfg.gpu_id).max_util
        self.width = self.prof.util(self.dc, cfg.batch_size)
        self.queue: deque = deque()
        self.busy_until = -math.inf
        self.dispatch_pending = False
        self.timeout_at: float | None = None
        self.alive = True
        self.busy_ms = 0.0
        self.arrived = 0
        self.low_since: float | None = None
        self.inbound = 0
        self.epoch = epoch
        self.slack = slack
        lat = self.prof.latency(self.dc, cfg.batch_size)
        cycle = cfg.duty_cycle if cfg.temporal else 0.0
        self.capacity = cfg.batch_size * 1000.0 / max(lat, cycle)

    @property
    def temporal(self) -> bool:
        return self.cfg.temporal

    def next_portion(self, t: float) -> float:
        """First portion start at or after ``t``."""
        base = self.epoch + self.cfg.start_time_in_cycle
        cyc = self.cfg.duty_cycle
        k = max(0, math.ceil((t - base) / cyc - 1e-9))
        return base + k * cyc


@dataclass
class SimReport:
    scenario: str
    policy: str
    seed: int
    horizon_ms: float
    effective_throughput: float = 0.0
    total_throughput: float = 0.0
    wasted_computation: float = 0.0
    slo_violation_fraction: float = 0.0
    latency_ms: dict = field(default_factory=lambda: {"mean": 0.0, "p50": 0.0, "p95": 0.0, "p99": 0.0})
    histogram: dict = field(default_factory=lambda: {"bin_ms": HIST_BIN_MS, "counts": []})
    memory_mib: dict = field(default_factory=dict)
    memory_total_mib: float = 0.0
    counts: dict = field(default_factory=dict)
    per_pipeline: dict = field(default_factory=dict)
    rounds: list = field(default_factory=list)
    scaler_actions: list = field(default_factory=list)
    # kept out of the JSON: wall-clock timings and bulky rows
    timeseries: list = field(default_factory=list, repr=False)
    round_wall_ms: list = field(default_factory=list, repr=False)
    events: list = field(default_factory=list, repr=False)
    placements: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA,
            "scenario": self.scenario,
            "policy": self.policy,
            "seed": self.seed,
            "horizon_ms": self.horizon_ms,
            "effective_throughput": self.effective_throughput,
            "total_throughput": self.total_throughput,
            "wasted_computation": self.wasted_computation,
            "slo_violation_fraction": self.slo_violation_fraction,
            "latency_ms": self.latency_ms,
            "histogram": self.histogram,
            "memory_mib": self.memory_mib,
            "memory_total_mib": self.memory_total_mib,
            "counts": self.counts,
            "per_pipeline": self.per_pipeline,
            "rounds": self.rounds,
            "scaler_actions": self.scaler_actions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def timeseries_csv(self) -> str:
        lines = ["time_ms,effective_tput,total_tput,p99_ms,mem_mib"]
        for row in self.timeseries:
            lines.append(",".join(_fmt(x) for x in row))
        return "\n".join(lines) + "\n"

    def placement_csv(self) -> str:
        """One row per instance per scheduling round."""
        lines = ["round_ms,pipeline,model,instance,batch_size,device,gpu,stream,start_ms,duty_cycle_ms,portion_ms,clone"]
        for t, instances in self.placements:
            for r in instances:
                cells = [
                    _fmt(t),
                    r.pipeline_id,
                    r.model_id,
                    str(r.instance_number),
                    str(r.batch_size),
                    r.device_id,
                    r.gpu_id or "",
                    r.stream_id or "",
                    "" if r.start_time_in_cycle is None else _fmt(r.start_time_in_cycle),
                    "" if r.duty_cycle is None else _fmt(r.duty_cycle),
                    "" if r.portion_length is None else _fmt(r.portion_length),
                    str(int(r.clone)),
                ]
                lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def events_ndjson(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(round(float(x), 6))


def _quantiles(values: Iterable[float]) -> dict:
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        return {"mean": 0.0, "p50": 0.0, "p95": 0.0, "p99": 0.0}
    p50, p95, p99 = np.percentile(arr, [50, 95, 99])
    return {"mean": float(arr.mean()), "p50": float(p50), "p95": float(p95), "p99": float(p99)}


def round_context(scenario: Scenario, arrivals, bw_traces, now: float, rng) -> RoundContext:
    """Statistics a scheduling round at ``now`` sees.

    The first round looks at its own upcoming period (nothing has been
    observed yet); later rounds look back one period.
    """
    lo, hi = (0.0, scenario.period) if now == 0 else (now - scenario.period, now)
    hi = min(hi, scenario.horizon)
    stats = {pid: rate_stats(arrivals[pid], lo, hi, pipe.source) for pid, pipe in sorted(scenario.pipelines.items())}
    bandwidth = {k: mean_bandwidth(tr, lo, hi) for k, tr in sorted(bw_traces.items())}
    return RoundContext(now, scenario.pipelines, scenario.cluster, scenario.profiles, stats, bandwidth, rng, scenario.cwd)


def plan_first_round(scenario: Scenario, policy: SchedulingPolicy, seed: int | None = None):
    """The plans ``policy`` installs at time zero, with the context it saw."""
    scenario.validate()
    mat = scenario.materialize(scenario.seed if seed is None else seed)
    ctx = round_context(scenario, mat.arrivals, mat.bandwidth, 0.0, mat.rng)
    return ctx, policy.on_scheduler_round(ctx)


class _Simulation:
    def __init__(self, scenario: Scenario, policy: SchedulingPolicy, seed: int | None):
        self.sc = scenario
        self.policy = policy
        self.seed = scenario.seed if seed is None else seed
        mat = scenario.materialize(self.seed)
        self.rng = mat.rng
        self.arrivals = mat.arrivals
        self.bw_traces = mat.bandwidth
        self.interference = InterferenceModel(scenario.sim.interference)
        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        self.workers: dict[tuple, _Worker] = {}
        self.by_model: dict[tuple[str, str], list[_Worker]] = {}
        self.placer = None
        self.round_time = 0.0
        self.epoch = 0.0
        self.slacks: dict[str, dict[str, float]] = {}
        self.mem_now = 0.0
        self.links: dict[tuple[str, str], _Link] = {}
        self.running: dict[str, list[tuple[float, float]]] = {}
        self.fanout_acc: dict[tuple[str, str], float] = {}
        self.blocked: dict[tuple[str, str], float] = {}
        self.next_qid = 0
        # accounting
        self.created = self.processed = self.dropped = 0
        self.in_transit = self.executing = 0
        self.source_queries = 0
        self.batches = self.inflated = 0
        self.results: dict[str, list[float]] = {p: [] for p in scenario.pipelines}
        self.on_time: dict[str, int] = {p: 0 for p in scenario.pipelines}
        self.window_lat: list[float] = []
        self.window_eff = self.window_tot = 0
        self.mem_peak: dict[str, float] = {g.gpu_id: 0.0 for _, g in scenario.cluster.all_gpus()}
        self.report = SimReport(scenario.name, policy.name, self.seed, scenario.horizon)
        self.log_events = scenario.sim.event_log
        self.scaling = policy.autoscale and scenario.scaler_enabled

    # -- event plumbing
    def push(self, t: float, kind: str, payload=None) -> None:
        # float round-off in cycle arithmetic must not schedule into the past
        t = max(t, self.now)
        heapq.heappush(self.heap, (t, self.seq, kind, payload))
        self.seq += 1

    def trace(self, kind: str, **detail) -> None:
        if self.log_events:
            self.report.events.append({"t": self.now, "kind": kind, **detail})

    def run(self) -> SimReport:
        sc = self.sc
        t = 0.0
        while t < sc.horizon:
            self.push(t, SCHEDULER_ROUND)
            t += sc.period
        if self.scaling:
            t = sc.scaler.tick
            while t < sc.horizon:
                self.push(t, SCALER_TICK)
                t += sc.scaler.tick
        t = sc.sim.sample_ms
        while t <= sc.horizon + _TOL:
            self.push(t, SAMPLE)
            t += sc.sim.sample_ms
        self.arrival_idx = {p: 0 for p in sorted(self.arrivals)}
        for pid in sorted(self.arrivals):
            self._schedule_arrival(pid)

        handlers = {
            ARRIVAL: self.on_arrival,
            BATCH_DISPATCH: self.on_dispatch,
            BATCH_COMPLETE: self.on_complete,
            TRANSFER_COMPLETE: self.on_transfer,
            SCHEDULER_ROUND: self.on_round,
            SCALER_TICK: self.on_tick,
            BATCH_TIMEOUT: self.on_timeout,
            SAMPLE: self.on_sample,
        }
        last = -math.inf
        while self.heap:
            t, _, kind, payload = heapq.heappop(self.heap)
            if t > sc.horizon:
                break
            if t < last:
                raise SimulationError(f"event at {t} processed after {last}")
            last = self.now = t
            handlers[kind](payload)
        return self.finish()

    # -- arrivals and routing
    def _schedule_arrival(self, pid: str) -> None:
        tr = self.arrivals[pid]
        i = self.arrival_idx[pid]
        if i < len(tr.times):
            self.push(tr.times[i], ARRIVAL, (pid, tr.counts[i]))
            self.arrival_idx[pid] = i + 1

    def on_arrival(self, payload) -> None:
        pid, count = payload
        pipe = self.sc.pipelines[pid]
        self._schedule_arrival(pid)
        tasks = []
        for _ in range(count):
            self.source_queries += 1
            tasks.append(Task(self.next_qid, pid, pipe.source, self.now, self.now + pipe.slo, self.now))
            self.next_qid += 1
        self.created += len(tasks)
        self.send(tasks, pipe.source_device)

    def route(self, pid: str, model: str, from_device: str | None = None) -> _Worker | None:
        """Pick the replica for a task.

        Replicas with portions get the task if they will dispatch it soonest
        (next portion start after arrival plus full batches queued ahead);
        others use join-shortest-queue normalized by batch size.
        """
        ws = self.by_model.get((pid, model))
        if not ws:
            return None
        if ws[0].temporal:
            return min(ws, key=lambda w: (self._service_start(w, from_device), w.cfg.instance_number))
        return min(ws, key=lambda w: ((len(w.queue) + w.inbound) / w.cfg.batch_size, w.cfg.instance_number))

    def _service_start(self, w: _Worker, from_device: str | None) -> float:
        eta = self.now
        if from_device is not None and from_device != w.cfg.device_id:
            ln = self._link(from_device, w.cfg.device_id)
            bw = bandwidth_at(ln.trace, self.now) if ln.trace is not None else 0.0
            if bw <= 0:
                return math.inf
            eta = max(self.now, ln.busy_until) + w.prof.in_size / bw * 1000.0
        if math.isinf(eta):
            return math.inf
        ahead = (len(w.queue) + w.inbound) // w.cfg.batch_size
        return w.next_portion(max(eta, w.busy_until)) + ahead * w.cfg.duty_cycle

    def send(self, tasks: list[Task], from_device: str) -> None:
        """Route tasks to instances, shipping them across links where needed."""
        groups: dict[tuple, tuple[_Worker, list[Task]]] = {}
        for t in tasks:
            w = self.route(t.pipeline_id, t.model_id, from_device)
            if w is None:
                self._drop([t], "no_instance")
                continue
            w.inbound += 1
            groups.setdefault(w.key, (w, []))[1].append(t)
        for w, ts in groups.values():
            if w.cfg.device_id == from_device:
                # co-located hand-off is immediate
                w.inbound -= len(ts)
                for t in ts:
                    self.enqueue(w, t)
                continue
            nbytes = len(ts) * w.prof.in_size
            done = self._link(from_device, w.cfg.device_id).send(self.now, nbytes)
            self.in_transit += len(ts)
            if math.isinf(done):
                # link never recovers within the traces; the tasks stay in flight
                continue
            self.push(done, TRANSFER_COMPLETE, (w, ts))

    def _link(self, a: str, b: str) -> _Link:
        ln = self.links.get((a, b))
        if ln is None:
            ln = self.links[(a, b)] = _Link(self.bw_traces.get(link_key(a, b)))
        return ln

    def on_transfer(self, payload) -> None:
        w, ts = payload
        self.in_transit -= len(ts)
        w.inbound -= len(ts)
        for t in ts:
            if w.alive:
                self.enqueue(w, t)
            else:
                alt = self.route(t.pipeline_id, t.model_id)
                if alt is None:
                    self._drop([t], "no_instance")
                else:
                    self.enqueue(alt, t)

    def enqueue(self, w: _Worker, t: Task) -> None:
        t.advance(self.now)
        w.queue.append(t)
        w.arrived += 1
        if w.temporal:
            if not w.dispatch_pending:
                w.dispatch_pending = True
                self.push(w.next_portion(max(self.now, w.busy_until)), BATCH_DISPATCH, w)
        else:
            self.try_dispatch(w)

    def _drop(self, tasks: list[Task], reason: str) -> None:
        self.dropped += len(tasks)
        if tasks:
            self.trace("drop", n=len(tasks), reason=reason)

    # -- batching and execution
    def on_dispatch(self, w: _Worker) -> None:
        w.dispatch_pending = False
        if not w.alive:
            return
        if w.busy_until > self.now + _TOL:
            w.dispatch_pending = True
            self.push(w.next_portion(w.busy_until), BATCH_DISPATCH, w)
            return
        batch, dropped = batch_collect(w.queue, w.cfg.batch_size, self.now, self.policy.flags.lazy_drop)
        self._drop(dropped, "late")
        if batch:
            self.execute(w, batch)
        if w.queue:
            w.dispatch_pending = True
            self.push(w.next_portion(max(self.now + 1e-6, w.busy_until)), BATCH_DISPATCH, w)

    def try_dispatch(self, w: _Worker) -> None:
        if not w.alive or w.busy_until > self.now + _TOL or not w.queue:
            return
        due = w.queue[0].birth + w.slack
        if len(w.queue) >= w.cfg.batch_size or self.now >= due - _TOL:
            batch, dropped = batch_collect(w.queue, w.cfg.batch_size, self.now, self.policy.flags.lazy_drop)
            self._drop(dropped, "late")
            if batch:
                self.execute(w, batch)
            elif w.queue:
                self.try_dispatch(w)
        elif w.timeout_at != due:
            w.timeout_at = due
            self.push(due, BATCH_TIMEOUT, w)

    def on_timeout(self, w: _Worker) -> None:
        if w.timeout_at is not None and abs(w.timeout_at - self.now) <= _TOL:
            w.timeout_at = None
            self.try_dispatch(w)

    def execute(self, w: _Worker, batch: list[Task]) -> None:
        lat = w.prof.latency_for_count(w.dc, len(batch))
        running = [r for r in self.running.get(w.gpu_id, ()) if r[0] > self.now + _TOL]
        u = w.width + sum(width for _, width in running)
        factor = self.interference.factor(u, w.max_util)
        if factor > 1.0:
            self.inflated += 1
            lat *= factor
        end = self.now + lat
        running.append((end, w.width))
        self.running[w.gpu_id] = running
        w.busy_until = end
        w.busy_ms += lat
        self.batches += 1
        self.executing += len(batch)
        for t in batch:
            t.advance(self.now)
        self.trace(BATCH_DISPATCH, instance="/".join(map(str, w.key)), n=len(batch), latency=lat, factor=factor)
        self.push(end, BATCH_COMPLETE, (w, batch))

    def on_complete(self, payload) -> None:
        w, batch = payload
        self.executing -= len(batch)
        self.processed += len(batch)
        pid, model = w.cfg.pipeline_id, w.cfg.model_id
        pipe = self.sc.pipelines[pid]
        children = pipe.downstream(model)
        out: list[Task] = []
        for t in batch:
            t.advance(self.now)
            if not children:
                self._result(t)
                continue
            key = (pid, model)
            acc = self.fanout_acc.get(key, 0.0) + w.prof.fanout
            k = int(acc + 1e-9)
            self.fanout_acc[key] = acc - k
            for c in children:
                for _ in range(k):
                    out.append(Task(t.query_id, pid, c, t.birth, t.deadline, self.now))
        self.created += len(out)
        if out:
            self.send(out, w.cfg.device_id)
        if w.alive and not w.temporal:
            self.try_dispatch(w)

    def _result(self, t: Task) -> None:
        lat = self.now - t.birth
        self.results[t.pipeline_id].append(lat)
        self.window_lat.append(lat)
        self.window_tot += 1
        if self.now <= t.deadline:
            self.on_time[t.pipeline_id] += 1
            self.window_eff += 1

    # -- scheduling rounds
    def on_round(self, _payload) -> None:
        ctx = round_context(self.sc, self.arrivals, self.bw_traces, self.now, self.rng)
        started = _time.perf_counter()
        result = self.policy.on_scheduler_round(ctx)
        self.report.round_wall_ms.append((_time.perf_counter() - started) * 1000.0)
        self.install(result, ctx)

    def _slack(self, plan: PipelinePlan) -> dict[str, float]:
        """Time after a query's birth by which each model should have dispatched."""
        pipe = self.sc.pipelines[plan.pipeline_id]
        rem: dict[str, float] = {}
        for m in reversed(pipe.models):
            rs = plan.instances.get(m) or []
            own = 0.0
            if rs:
                dc = self.sc.cluster.device(rs[0].device_id).device_class
                own = self.sc.profiles[m].latency(dc, rs[0].batch_size)
            rem[m] = own + max((rem[c] for c in pipe.downstream(m)), default=0.0)
        return {m: max(0.0, pipe.slo / 2 - rem[m]) for m in pipe.models}

    def install(self, result: RoundResult, ctx: RoundContext) -> None:
        self.placer = result.placer
        self.round_time = self.now
        new = {r.key: r for r in result.instances()}
        current = {k: w.cfg for k, w in self.workers.items()}
        self.report.rounds.append(
            {
                "time_ms": self.now,
                "instances": len(new),
                "rejected": sorted(result.rejected),
                "unplaced": sum(len(p.unplaced) for p in result.plans),
                "reused": new == current,
            }
        )
        self.trace(SCHEDULER_ROUND, instances=len(new), rejected=sorted(result.rejected))
        self.report.placements.append((self.now, sorted(new.values(), key=lambda r: r.key)))
        if new == current:
            return
        drain = max((w.busy_until for w in self.workers.values()), default=self.now)
        epoch = max(self.now, drain)
        orphans: list[Task] = []
        for w in self.workers.values():
            w.alive = False
            orphans.extend(w.queue)
            w.queue.clear()
        self.workers = {}
        self.by_model = {}
        self.slacks = {}
        for plan in sorted(result.plans, key=lambda p: p.pipeline_id):
            self.slacks[plan.pipeline_id] = self._slack(plan)
        for r in sorted(new.values(), key=lambda r: r.key):
            self._add_worker(r, epoch)
        self.epoch = epoch
        orphans.sort(key=lambda t: (t.birth, t.query_id))
        for t in orphans:
            w = self.route(t.pipeline_id, t.model_id)
            if w is None:
                self._drop([t], "no_instance")
            else:
                self.enqueue(w, t)
        self._track_memory()

    def _add_worker(self, r: InstanceConfig, epoch: float) -> _Worker:
        slack = self.slacks.get(r.pipeline_id, {}).get(r.model_id, 0.0)
        w = _Worker(r, self, epoch, slack)
        self.workers[r.key] = w
        ws = self.by_model.setdefault((r.pipeline_id, r.model_id), [])
        ws.append(w)
        ws.sort(key=lambda x: x.cfg.instance_number)
        return w

    def _track_memory(self) -> float:
        by_gpu: dict[str, list[InstanceConfig]] = {}
        for w in self.workers.values():
            by_gpu.setdefault(w.gpu_id, []).append(w.cfg)
        total = 0.0
        for g, rs in by_gpu.items():
            m = gpu_memory(rs, self.sc.profiles)
            total += m
            self.mem_peak[g] = max(self.mem_peak[g], m)
        self.mem_now = total
        return total

    # -- autoscaling
    def on_tick(self, _payload) -> None:
        sc = self.sc
        tick = sc.scaler.tick
        for (pid, model), ws in sorted(self.by_model.items()):
            ws = [w for w in ws if w.alive]
            if not ws:
                continue
            runtimes = []
            for w in ws:
                util = min(1.0, w.busy_ms / tick)
                if util < sc.scaler.dip_threshold:
                    if w.low_since is None:
                        w.low_since = self.now
                else:
                    w.low_since = None
                busy = w.busy_until > self.now or bool(w.queue) or w.inbound > 0
                runtimes.append(autoscaler.InstanceRuntime(w.key, util, w.low_since, w.cfg.clone, busy))
            stats = autoscaler.ModelRuntimeStats(
                pid,
                model,
                self.now,
                self.now - self.round_time,
                sum(w.arrived for w in ws) * 1000.0 / tick,
                sum(w.capacity for w in ws),
                tuple(runtimes),
                self.blocked.get((pid, model), -1.0),
            )
            for w in ws:
                w.busy_ms = 0.0
                w.arrived = 0
            action = autoscaler.evaluate(stats, sc.scaler)
            if action.kind == autoscaler.HOLD:
                continue
            res = autoscaler.apply(action, self.placer, [w.cfg for w in ws])
            entry = {"time_ms": self.now, "action": action.kind, "pipeline": pid, "model": model}
            if action.kind == autoscaler.SCALE_UP:
                if res is None:
                    self.blocked[(pid, model)] = self.now + sc.scaler.cooldown
                    entry["placed"] = False
                else:
                    self._add_worker(res, self.epoch)
                    entry["placed"] = True
                    entry["instance"] = res.instance_number
                    entry["device"] = res.device_id
            else:
                w = self.workers.pop(res)
                w.alive = False
                self.by_model[(pid, model)].remove(w)
                entry["instance"] = res[2]
            self.report.scaler_actions.append(entry)
            self.trace(SCALER_TICK, **{k: v for k, v in entry.items() if k != "time_ms"})
            self._track_memory()

    # -- metrics
    def on_sample(self, _payload) -> None:
        secs = self.sc.sim.sample_ms / 1000.0
        p99 = float(np.percentile(self.window_lat, 99)) if self.window_lat else 0.0
        self.report.timeseries.append(
            (self.now, self.window_eff / secs, self.window_tot / secs, p99, self.mem_now)
        )
        self.window_lat = []
        self.window_eff = self.window_tot = 0

    def in_flight(self) -> int:
        queued = sum(len(w.queue) for w in self.workers.values())
        return queued + self.in_transit + self.executing

    def finish(self) -> SimReport:
        rep = self.report
        secs = self.sc.horizon / 1000.0
        all_lat = [x for p in sorted(self.results) for x in self.results[p]]
        n_res = len(all_lat)
        n_eff = sum(self.on_time.values())
        rep.effective_throughput = n_eff / secs
        rep.total_throughput = n_res / secs
        rep.wasted_computation = rep.total_throughput - rep.effective_throughput
        rep.slo_violation_fraction = (n_res - n_eff) / n_res if n_res else 0.0
        rep.latency_ms = _quantiles(all_lat)
        if all_lat:
            counts = np.bincount(np.floor(np.asarray(all_lat) / HIST_BIN_MS).astype(int))
            rep.histogram = {"bin_ms": HIST_BIN_MS, "counts": [int(c) for c in counts]}
        rep.memory_mib = dict(sorted(self.mem_peak.items()))
        rep.memory_total_mib = float(sum(self.mem_peak.values()))
        inflight = self.in_flight()
        rep.counts = {
            "source_queries": self.source_queries,
            "tasks_created": self.created,
            "tasks_processed": self.processed,
            "tasks_dropped": self.dropped,
            "tasks_in_flight": inflight,
            "results": n_res,
            "results_on_time": n_eff,
            "batches": self.batches,
            "inflated_batches": self.inflated,
        }
        if self.created != self.processed + self.dropped + inflight:
            raise SimulationError(f"task conservation broken: {rep.counts}")
        for pid in sorted(self.results):
            lat = self.results[pid]
            rep.per_pipeline[pid] = {
                "effective_throughput": self.on_time[pid] / secs,
                "total_throughput": len(lat) / secs,
                "latency_ms": _quantiles(lat),
            }
        return rep


def run(scenario: Scenario, policy: SchedulingPolicy, seed: int | None = None) -> SimReport:
    """Simulate ``scenario`` under ``policy``; deterministic in ``seed``."""
    scenario.validate()
    return _Simulation(scenario, policy, seed).run()
