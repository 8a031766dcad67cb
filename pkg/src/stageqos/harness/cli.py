"""Command-line entry point: ``stageqos <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from ..workload import (
    DEFAULT_MIX,
    BurstProfile,
    RateCurveTrace,
    generate_synthetic_trace,
    mix_report,
    split_by_mix,
)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _run_dir(base: str | None, name: str) -> Path:
    if base:
        path = Path(base)
    else:
        path = Path("runs") / f"{name}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _write_manifest(out: Path, command: str, args: argparse.Namespace, files: list[str]) -> None:
    manifest = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "files": files + ["manifest.json"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def cmd_run_scenario(args) -> int:
    from .scenario import ScenarioSpec, run_scenario, run_scenarios

    specs = [ScenarioSpec.load(path) for path in args.spec]
    for spec in specs:
        if args.mode:
            spec.mode = args.mode
    keys = ("name", "algorithm", "failed", "makespan_s", "peak_aggregate", "exceeded_max_rate")
    if len(specs) == 1:
        out = _run_dir(args.out, specs[0].name)
        summaries = [run_scenario(specs[0], out, plots=not args.no_plots).summary()]
    else:
        out = _run_dir(args.out, "scenarios")
        summaries = run_scenarios(specs, out, parallel=args.parallel, plots=not args.no_plots)
    for summary in summaries:
        print(json.dumps({k: summary[k] for k in keys}))
    print(f"artifacts in {out}")
    return 1 if any(s["failed"] for s in summaries) else 0


def cmd_bench_stage(args) -> int:
    from .bench import bench_stage, rows_as_dicts
    from .plotting import plot_series

    out = _run_dir(args.out, "bench-stage")
    rows = bench_stage(args.threads, args.requests, stages=args.stages, op=args.op, repeat=args.repeat)
    data = rows_as_dicts(rows)
    _write_rows(out / "bench_stage.csv", data)
    files = ["bench_stage.csv"]
    for r in data:
        print(f"{r['kind']:>12}  threads={r['threads']:<4} stages={r['stages']:<4} "
              f"{r['ops_per_s'] / 1e6:.3f} Mops/s")
    if not args.no_plots and data:
        series = {}
        for kind, key in (("single-stage", "threads"), ("multi-stage", "stages")):
            pts = [(r[key], r["ops_per_s"] / 1e6) for r in data if r["kind"] == kind]
            if pts:
                series[kind] = pts
        for kind, pts in series.items():
            name = f"bench_stage_{kind}.png"
            plot_series([p[0] for p in pts], {kind: [p[1] for p in pts]}, out / name,
                        xlabel="threads" if kind == "single-stage" else "stages",
                        ylabel="Mops/s", title=kind, logx=True)
            files.append(name)
    _write_manifest(out, "bench-stage", args, files)
    return 0


def cmd_bench_control(args) -> int:
    from .bench import bench_control, rows_as_dicts
    from .plotting import plot_series

    out = _run_dir(args.out, "bench-control")
    rows = bench_control(args.controllers, args.iterations, stages_per_lc=args.stages_per_lc,
                         algorithm=args.algorithm)
    data = rows_as_dicts(rows)
    _write_rows(out / "bench_control.csv", data)
    files = ["bench_control.csv"]
    for r in data:
        if r["p50_us"] is None:
            print(f"controllers={r['local_controllers']:<4} no iterations")
        else:
            print(f"controllers={r['local_controllers']:<4} p50={r['p50_us']:.0f}us "
                  f"p95={r['p95_us']:.0f}us p99={r['p99_us']:.0f}us")
    measured = [r for r in data if r["p50_us"] is not None]
    if not args.no_plots and measured:
        x = [r["local_controllers"] for r in measured]
        plot_series(x, {q: [r[f"{q}_us"] for r in measured] for q in ("p50", "p95", "p99")},
                    out / "bench_control.png", xlabel="local controllers", ylabel="cycle latency (us)",
                    logx=True)
        files.append("bench_control.png")
    _write_manifest(out, "bench-control", args, files)
    return 0


def cmd_bench_overhead(args) -> int:
    from .bench import bench_overhead, closed_loop_overhead

    out = _run_dir(args.out, "bench-overhead")
    res = bench_overhead(args.seconds, args.rate, op=args.op, threads=args.threads)
    row = {"seconds": res.seconds, "rate": res.rate, "baseline_ops_per_s": res.baseline_ops_per_s,
           "passthrough_ops_per_s": res.passthrough_ops_per_s, "overhead": res.overhead_pct}
    rows = [row]
    if args.closed_loop:
        cl = closed_loop_overhead(op=args.op)
        rows.append({"seconds": "closed-loop", "rate": "", "baseline_ops_per_s": cl["direct_ops_per_s"],
                     "passthrough_ops_per_s": cl["stage_ops_per_s"], "overhead": f"{100 * cl['overhead']:.2f}%"})
    _write_rows(out / "bench_overhead.csv", rows)
    for r in rows:
        print(r)
    _write_manifest(out, "bench-overhead", args, ["bench_overhead.csv"])
    return 0


def cmd_gen_trace(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profile = BurstProfile(args.burst_prob, args.burst_multiplier, args.quiet_prob)
    curve = generate_synthetic_trace(args.seed, args.seconds, args.mean_rate, profile)
    if args.op_type:
        traces = [RateCurveTrace(args.op_type, curve.samples)]
    else:
        traces = split_by_mix(curve.samples, DEFAULT_MIX)
    for t in traces:
        path = t.save(out)
        print(f"{path}  total={t.total}")
    print(json.dumps({op: round(share, 4) for op, share in mix_report(traces).items()}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stageqos", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-scenario", help="run a scenario spec (JSON) and write CSV, summary and plots")
    p.add_argument("spec", nargs="+", help="scenario JSON file(s); several run into <out>/<name>")
    p.add_argument("--out", help="run directory (default: runs/<name>-<timestamp>)")
    p.add_argument("--parallel", type=int, default=1, help="scenarios run at once, one process each")
    p.add_argument("--mode", choices=("thread", "process"), help="override the scenario's execution mode")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_run_scenario)

    p = sub.add_parser("bench-stage", help="closed-loop stage throughput")
    p.add_argument("--threads", type=_int_list, default=[1, 2, 4, 8], help="single-stage thread counts")
    p.add_argument("--stages", type=_int_list, default=[], help="multi-stage counts (one process each)")
    p.add_argument("--requests", type=int, default=200_000, help="requests per thread")
    p.add_argument("--op", default="open")
    p.add_argument("--repeat", type=int, default=1, help="runs per point; the best is kept")
    p.add_argument("--out")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_bench_stage)

    p = sub.add_parser("bench-control", help="control-cycle latency over loopback")
    p.add_argument("--controllers", type=_int_list, default=[1, 2, 4, 8], help="local controller counts")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--stages-per-lc", type=int, default=1)
    p.add_argument("--algorithm", default="psfa")
    p.add_argument("--out")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_bench_control)

    p = sub.add_parser("bench-overhead", help="sink-direct vs stage-passthrough on a paced workload")
    p.add_argument("--seconds", type=int, default=10)
    p.add_argument("--rate", type=int, default=20_000, help="offered ops/s")
    p.add_argument("--op", default="getattr")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--closed-loop", action="store_true", help="also report an unpaced comparison")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_overhead)

    p = sub.add_parser("gen-trace", help="write synthetic <optype>_log.txt traces")
    p.add_argument("out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seconds", type=int, default=120)
    p.add_argument("--mean-rate", type=float, default=5000)
    p.add_argument("--burst-prob", type=float, default=0.05)
    p.add_argument("--burst-multiplier", type=float, default=5.0)
    p.add_argument("--quiet-prob", type=float, default=0.2)
    p.add_argument("--op-type", help="single op type instead of the default mix")
    p.set_defaults(func=cmd_gen_trace)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
