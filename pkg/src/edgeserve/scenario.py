"""Scenario documents: cluster, pipelines, profiles, traces and run parameters.

A scenario is a YAML file.  Profile tables and trace CSVs are referenced by
path relative to the scenario file; traces may instead be described by a
generator spec and are then materialized from the run seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .autoscaler import ScalerPolicy
from .cwd import CwdParams
from .domain import (
    SERVER_GPU,
    Cluster,
    DeviceSpec,
    GpuSpec,
    ModelProfile,
    PipelineSpec,
    ScenarioError,
    link_key,
    load_profiles,
)
from .traces import (
    ArrivalTrace,
    BandwidthTrace,
    TraceError,
    load_arrival_trace,
    load_bandwidth_trace,
    periodic_arrivals,
    poisson_arrivals,
    synthetic_bandwidth,
)

DEFAULT_PERIOD_MS = 360_000.0


class ScenarioErrors(ScenarioError):
    """Validation failure carrying every problem found."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class SimParams:
    interference: str = "proportional"  # or "none"
    sample_ms: float = 1000.0
    event_log: bool = False

    def __post_init__(self):
        if self.interference not in ("proportional", "none"):
            raise ScenarioError(f"unknown interference mode {self.interference!r}")
        if self.sample_ms <= 0:
            raise ScenarioError("sample_ms must be > 0")


@dataclass
class Scenario:
    name: str
    cluster: Cluster
    pipelines: dict[str, PipelineSpec]
    profiles: dict[str, ModelProfile]
    # pipeline id -> ArrivalTrace or generator spec dict
    arrivals: dict[str, Any]
    # link key -> BandwidthTrace, generator spec dict or constant bytes/s
    links: dict[tuple[str, str], Any] = field(default_factory=dict)
    horizon: float = 1_800_000.0
    period: float = DEFAULT_PERIOD_MS
    seed: int = 0
    cwd: CwdParams = CwdParams()
    scaler: ScalerPolicy = ScalerPolicy()
    scaler_enabled: bool = True
    sim: SimParams = SimParams()

    def validate(self) -> None:
        errors = []
        if self.horizon <= 0:
            errors.append("horizon must be > 0")
        if not self.period > 0:
            errors.append("period must be > 0")
        elif self.horizon <= self.period and self.period != math.inf:
            errors.append(f"horizon {self.horizon} must exceed the scheduling period {self.period}")
        server_class = self.cluster.server.device_class
        for pid, pipe in sorted(self.pipelines.items()):
            if pipe.source_device not in self.cluster.devices:
                errors.append(f"{pid}: unknown source device {pipe.source_device!r}")
            for m in pipe.models:
                prof = self.profiles.get(m)
                if prof is None:
                    errors.append(f"{pid}: model {m!r} has no profile")
                elif not prof.batch_sizes(server_class):
                    errors.append(f"{pid}: model {m!r} has no profile for the server class {server_class}")
            if pid not in self.arrivals:
                errors.append(f"{pid}: no arrival trace")
        for pid in sorted(set(self.arrivals) - set(self.pipelines)):
            errors.append(f"arrivals given for unknown pipeline {pid!r}")
        for a, b in sorted(self.links):
            for d in (a, b):
                if d not in self.cluster.devices:
                    errors.append(f"link {a}-{b}: unknown device {d!r}")
        if errors:
            raise ScenarioErrors(errors)

    def materialize(self, seed: int | None = None) -> "Materialized":
        """Resolve generator specs into traces; deterministic in ``seed``."""
        seed = self.seed if seed is None else seed
        # one child per generated trace plus one for the run
        keys = [("arr", p) for p in sorted(self.arrivals)] + [("bw", k) for k in sorted(self.links)]
        children = np.random.SeedSequence(seed).spawn(len(keys) + 1)
        rngs = {k: np.random.default_rng(c) for k, c in zip(keys, children)}
        arrivals = {}
        for pid in sorted(self.arrivals):
            arrivals[pid] = _make_arrivals(pid, self.arrivals[pid], self.horizon, rngs[("arr", pid)])
        links = {}
        for k in sorted(self.links):
            links[k] = _make_bandwidth(k, self.links[k], self.horizon, rngs[("bw", k)])
        return Materialized(arrivals, links, np.random.default_rng(children[-1]))


@dataclass
class Materialized:
    arrivals: dict[str, ArrivalTrace]
    bandwidth: dict[tuple[str, str], BandwidthTrace]
    rng: np.random.Generator


def _make_arrivals(pid: str, spec, horizon: float, rng) -> ArrivalTrace:
    if isinstance(spec, ArrivalTrace):
        return spec
    if "periodic" in spec:
        return periodic_arrivals(pid, float(spec["periodic"]["fps"]), horizon)
    if "poisson" in spec:
        p = spec["poisson"]
        return poisson_arrivals(
            pid,
            float(p["rate"]),
            horizon,
            rng,
            surge_amplitude=float(p.get("surge_amplitude", 1.0)),
            surge_period_ms=float(p.get("surge_period_ms", 0.0)),
            surge_duty=float(p.get("surge_duty", 0.5)),
        )
    raise ScenarioError(f"{pid}: arrival spec needs one of file, periodic, poisson")


def _make_bandwidth(link: tuple[str, str], spec, horizon: float, rng) -> BandwidthTrace:
    if isinstance(spec, BandwidthTrace):
        return spec
    if isinstance(spec, (int, float)):
        return BandwidthTrace(link, (0.0,), (float(spec),))
    if "constant_bps" in spec:
        return BandwidthTrace(link, (0.0,), (float(spec["constant_bps"]),))
    if "synthetic" in spec:
        s = spec["synthetic"]
        return synthetic_bandwidth(
            link,
            float(s["mean_bps"]),
            horizon,
            rng,
            step_ms=float(s.get("step_ms", 1000.0)),
            volatility=float(s.get("volatility", 0.25)),
            outage_prob=float(s.get("outage_prob", 0.0)),
            outage_ms=float(s.get("outage_ms", 5000.0)),
            floor_frac=float(s.get("floor_frac", 0.1)),
        )
    raise ScenarioError(f"link {link}: bandwidth spec needs one of file, constant_bps, synthetic")


# ---------------------------------------------------------------------------
# YAML loading


def bundled_scenarios() -> list[str]:
    root = resources.files("edgeserve") / "scenarios"
    return sorted(p.name for p in root.iterdir() if p.is_dir() and (p / "scenario.yaml").is_file())


def resolve_path(name_or_path: str | Path) -> Path:
    """A scenario file, a directory holding ``scenario.yaml`` or a bundled name."""
    p = Path(name_or_path)
    if p.is_dir():
        p = p / "scenario.yaml"
    if p.is_file():
        return p
    name = p.name if p.name != "scenario.yaml" else p.parent.name
    bundled = resources.files("edgeserve") / "scenarios" / name / "scenario.yaml"
    if bundled.is_file():
        return Path(str(bundled))
    raise ScenarioErrors([f"scenario not found: {name_or_path}"])


def load_scenario(path: str | Path, **overrides) -> Scenario:
    """Parse and validate a scenario file.

    ``overrides`` may set ``horizon``, ``period`` or ``seed``.
    """
    path = resolve_path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioErrors([f"{path}: {exc}"]) from None
    if not isinstance(doc, dict):
        raise ScenarioErrors([f"{path}: top level must be a mapping"])
    try:
        sc = _from_doc(doc, path.parent)
    except (ScenarioError, TraceError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioErrors):
            raise
        msg = f"missing key {exc}" if isinstance(exc, KeyError) else str(exc)
        raise ScenarioErrors([f"{path}: {msg}"]) from None
    for k, v in overrides.items():
        if v is not None:
            setattr(sc, k, v)
    sc.validate()
    return sc


def _from_doc(doc: Mapping, base: Path) -> Scenario:
    devices = {}
    for d in doc["devices"]:
        gpus = tuple(
            GpuSpec(
                str(g["id"]),
                float(g["mem_mib"]),
                float(g.get("max_util", 1.0)),
                int(g.get("streams", 2)),
            )
            for g in d.get("gpus", [])
        )
        dev = DeviceSpec(str(d["id"]), str(d["class"]), gpus, float(d.get("intra_bps", 10e9)))
        if dev.device_id in devices:
            raise ScenarioError(f"duplicate device {dev.device_id}")
        devices[dev.device_id] = dev
    server = doc.get("server") or next((k for k, d in devices.items() if d.device_class == SERVER_GPU), None)
    if server is None:
        raise ScenarioError("no server device")
    cluster = Cluster(devices, server)

    prof = doc["profiles"]
    profiles = load_profiles(base / prof["latency"], base / prof["models"])

    pipelines: dict[str, PipelineSpec] = {}
    arrivals: dict[str, Any] = {}
    for p in doc["pipelines"]:
        sources = p.get("sources") or [p["source"]]
        for src in sources:
            pid = str(p["id"]) if len(sources) == 1 else f"{p['id']}_{src}"
            if pid in pipelines:
                raise ScenarioError(f"duplicate pipeline {pid}")
            dag = {str(k): tuple(v or ()) for k, v in p["dag"].items()}
            pipelines[pid] = PipelineSpec(pid, dag, float(p["slo_ms"]), str(src))
            spec = p["arrivals"]
            if "file" in spec:
                f = str(spec["file"]).format(source=src, pipeline=pid)
                arrivals[pid] = load_arrival_trace(base / f, pid)
            else:
                arrivals[pid] = dict(spec)

    links: dict[tuple[str, str], Any] = {}
    for ln in doc.get("links", []):
        pairs = [(e, ln["b"]) for e in ln["edges"]] if "edges" in ln else [(ln["a"], ln["b"])]
        for a, b in pairs:
            key = link_key(a, b)
            if "file" in ln:
                f = str(ln["file"]).format(a=key[0], b=key[1])
                links[key] = load_bandwidth_trace(base / f, key)
            else:
                links[key] = {k: v for k, v in ln.items() if k not in ("a", "b", "edges")}

    cwd_doc = doc.get("cwd", {})
    cwd = CwdParams(
        alpha=float(cwd_doc.get("alpha", 1.0)),
        max_instances_per_model=int(cwd_doc.get("max_instances", 8)),
        headroom=float(cwd_doc.get("headroom", 1.0)),
    )
    sc_doc = doc.get("scaler", {})
    scaler = ScalerPolicy(
        surge_threshold=float(sc_doc.get("surge", 0.3)),
        dip_threshold=float(sc_doc.get("dip", 0.2)),
        cooldown=float(sc_doc.get("cooldown_ms", 30_000)),
        tick=float(sc_doc.get("tick_ms", 5_000)),
    )
    sim_doc = doc.get("sim", {})
    sim = SimParams(
        interference=str(sim_doc.get("interference", "proportional")),
        sample_ms=float(sim_doc.get("sample_ms", 1000)),
        event_log=bool(sim_doc.get("event_log", False)),
    )
    return Scenario(
        name=str(doc.get("name", base.name)),
        cluster=cluster,
        pipelines=pipelines,
        profiles=profiles,
        arrivals=arrivals,
        links=links,
        horizon=float(doc.get("horizon_ms", 1_800_000)),
        period=float(doc.get("period_ms", DEFAULT_PERIOD_MS)),
        seed=int(doc.get("seed", 0)),
        cwd=cwd,
        scaler=scaler,
        scaler_enabled=bool(sc_doc.get("enabled", True)),
        sim=sim,
    )
