"""Command-line front end.

    edgeserve run --scenario S --policy octopinf --seed 1 --out DIR
    edgeserve compare --scenario S --policies octopinf,no_coral --seeds 1,2,3 --out table.csv
    edgeserve gen-traces --kind poisson --rate 15 --duration-ms 60000 --seed 7 --out arrivals.csv
    edgeserve validate --scenario S

Exit status is 0 on success, 1 when ``validate`` finds violations and 2 when
the scenario or arguments are invalid.  Errors are printed to stderr as a
JSON object with an ``errors`` list.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shlex
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .domain import ScenarioError, link_key, validate_plan
from .policies import POLICIES, get_policy
from .scenario import ScenarioErrors, load_scenario
from .simengine import SimReport, plan_first_round, run
from .traces import (
    TraceError,
    periodic_arrivals,
    poisson_arrivals,
    synthetic_bandwidth,
    write_arrival_trace,
    write_bandwidth_trace,
)

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_INVALID = 2

COMPARE_COLUMNS = [
    "policy",
    "runs",
    "effective_throughput",
    "total_throughput",
    "throughput_ratio",
    "p99_latency_ms",
    "memory_mib",
    "slo_violation_fraction",
]


class _Invalid(Exception):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


def _csv_list(text: str, cast=str) -> list:
    items = [x.strip() for x in text.split(",") if x.strip()]
    try:
        return [cast(x) for x in items]
    except ValueError:
        raise _Invalid([f"cannot parse list {text!r}"]) from None


def _load(args) -> "object":
    try:
        return load_scenario(args.scenario, horizon=args.horizon_ms, period=args.period_ms)
    except ScenarioErrors as exc:
        raise _Invalid(exc.errors) from None
    except (ScenarioError, TraceError, OSError) as exc:
        raise _Invalid([str(exc)]) from None


def _policy(name: str):
    if name not in POLICIES:
        raise _Invalid([f"unknown policy {name!r}; choose from {', '.join(sorted(POLICIES))}"])
    return get_policy(name)


def _run_log(report: SimReport, invocation: str) -> str:
    out = [f"# {invocation}"]
    for r in report.rounds:
        out.append(
            f"{r['time_ms']:.0f} round instances={r['instances']} unplaced={r['unplaced']}"
            f" rejected={','.join(r['rejected']) or '-'} reused={r['reused']}"
        )
    for a in report.scaler_actions:
        out.append(f"{a['time_ms']:.0f} scaler {a['action']} {a['pipeline']}/{a['model']}")
    c = report.counts
    out.append(
        f"done effective={report.effective_throughput:.3f}/s total={report.total_throughput:.3f}/s"
        f" results={c['results']} on_time={c['results_on_time']} dropped={c['tasks_dropped']}"
        f" in_flight={c['tasks_in_flight']}"
    )
    return "\n".join(out) + "\n"


def cmd_run(args) -> int:
    sc = _load(args)
    policy = _policy(args.policy)
    report = run(sc, policy, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "timeseries.csv").write_text(report.timeseries_csv())
    (out / "placement.csv").write_text(report.placement_csv())
    (out / "run.log").write_text(_run_log(report, args.invocation))
    if report.events:
        (out / "events.ndjson").write_text(report.events_ndjson())
    print(
        f"{report.policy} seed={report.seed}: effective {report.effective_throughput:.2f}/s, "
        f"p99 {report.latency_ms['p99']:.1f} ms, memory {report.memory_total_mib:.0f} MiB -> {out}"
    )
    return EXIT_OK


def compare_table(reports: list[SimReport], policies: list[str]) -> list[dict]:
    """Per-policy means over seeds; a pure function of the reports."""
    rows = []
    for name in policies:
        rs = [r for r in reports if r.policy == name]
        if not rs:
            continue
        eff = float(np.mean([r.effective_throughput for r in rs]))
        tot = float(np.mean([r.total_throughput for r in rs]))
        rows.append(
            {
                "policy": name,
                "runs": len(rs),
                "effective_throughput": eff,
                "total_throughput": tot,
                "throughput_ratio": eff / tot if tot > 0 else 0.0,
                "p99_latency_ms": float(np.mean([r.latency_ms["p99"] for r in rs])),
                "memory_mib": float(np.mean([r.memory_total_mib for r in rs])),
                "slo_violation_fraction": float(np.mean([r.slo_violation_fraction for r in rs])),
            }
        )
    return rows


def format_table(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, COMPARE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def run_matrix(scenario, policies: list[str], seeds: list[int], jobs: int = 1) -> list[SimReport]:
    """Every (policy, seed) pair, optionally on a thread pool; order is fixed."""
    pairs = [(p, s) for p in policies for s in seeds]
    if jobs <= 1:
        return [run(scenario, get_policy(p), s) for p, s in pairs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda ps: run(scenario, get_policy(ps[0]), ps[1]), pairs))


def cmd_compare(args) -> int:
    sc = _load(args)
    policies = _csv_list(args.policies)
    seeds = _csv_list(args.seeds, int)
    if not policies or not seeds:
        raise _Invalid(["need at least one policy and one seed"])
    for p in policies:
        _policy(p)
    reports = run_matrix(sc, policies, seeds, args.jobs)
    text = format_table(compare_table(reports, policies))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    if args.reports:
        d = Path(args.reports)
        d.mkdir(parents=True, exist_ok=True)
        for r in reports:
            (d / f"{r.policy}_seed{r.seed}.json").write_text(r.to_json())
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_traces(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "periodic":
        if not args.fps or args.fps <= 0:
            raise _Invalid(["--fps must be > 0"])
        trace = periodic_arrivals(args.source, args.fps, args.duration_ms)
        write_arrival_trace(trace, out)
        n = sum(trace.counts)
    elif args.kind == "poisson":
        if not args.rate or args.rate <= 0:
            raise _Invalid(["--rate must be > 0"])
        trace = poisson_arrivals(
            args.source,
            args.rate,
            args.duration_ms,
            rng,
            surge_amplitude=args.surge_amplitude,
            surge_period_ms=args.surge_period_ms,
            surge_duty=args.surge_duty,
        )
        write_arrival_trace(trace, out)
        n = sum(trace.counts)
    else:
        if not args.mean_bps or args.mean_bps <= 0:
            raise _Invalid(["--mean-bps must be > 0"])
        a, b = _csv_list(args.link)
        trace = synthetic_bandwidth(
            link_key(a, b),
            args.mean_bps,
            args.duration_ms,
            rng,
            step_ms=args.step_ms,
            volatility=args.volatility,
            outage_prob=args.outage_prob,
            outage_ms=args.outage_ms,
        )
        write_bandwidth_trace(trace, out)
        n = len(trace.times)
    print(f"wrote {n} rows to {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    sc = _load(args)
    ctx, result = plan_first_round(sc, _policy(args.policy), args.seed)
    violations = validate_plan(result.plans, sc.pipelines, sc.cluster, sc.profiles, ctx.bandwidth)
    doc = {
        "scenario": sc.name,
        "policy": args.policy,
        "instances": len(result.instances()),
        "rejected": sorted(result.rejected),
        "violations": [{"constraint": v.constraint, "subject": v.subject, "margin": v.margin} for v in violations],
    }
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_VIOLATIONS if violations else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="edgeserve", description="Edge-server DNN pipeline serving simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario_args(p):
        p.add_argument("--scenario", required=True, help="scenario file, directory or bundled name")
        p.add_argument("--horizon-ms", type=float, default=None)
        p.add_argument("--period-ms", type=float, default=None)

    p = sub.add_parser("run", help="simulate one policy")
    scenario_args(p)
    p.add_argument("--policy", default="octopinf")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="average several policies over seeds into a CSV table")
    scenario_args(p)
    p.add_argument("--policies", default="octopinf,no_coral,static_batch,server_only")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--out", default=None, help="CSV path (the table is also printed)")
    p.add_argument("--reports", default=None, help="directory for per-run report.json files")
    p.add_argument("--jobs", type=int, default=1, help="worker threads")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gen-traces", help="write a synthetic arrival or bandwidth trace")
    p.add_argument("--kind", choices=["periodic", "poisson", "bandwidth"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration-ms", type=float, required=True)
    p.add_argument("--source", default="src0")
    p.add_argument("--fps", type=float)
    p.add_argument("--rate", type=float, help="queries/s")
    p.add_argument("--surge-amplitude", type=float, default=1.0)
    p.add_argument("--surge-period-ms", type=float, default=0.0)
    p.add_argument("--surge-duty", type=float, default=0.5)
    p.add_argument("--link", default="edge0,server")
    p.add_argument("--mean-bps", type=float)
    p.add_argument("--step-ms", type=float, default=1000.0)
    p.add_argument("--volatility", type=float, default=0.25)
    p.add_argument("--outage-prob", type=float, default=0.0)
    p.add_argument("--outage-ms", type=float, default=5000.0)
    p.set_defaults(func=cmd_gen_traces)

    p = sub.add_parser("validate", help="check the first round's plans against all constraints")
    scenario_args(p)
    p.add_argument("--policy", default="octopinf")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    args.invocation = "edgeserve " + shlex.join(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Invalid as exc:
        print(json.dumps({"errors": exc.errors}), file=sys.stderr)
        return EXIT_INVALID
    except (TraceError, ValueError) as exc:
        print(json.dumps({"errors": [str(exc)]}), file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
