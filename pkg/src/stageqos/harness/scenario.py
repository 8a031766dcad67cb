"""Scenario runner: controllers, stages and replayers wired per a JSON spec.

A scenario describes a shared ceiling, an allocation algorithm and a list of
jobs, each with a start offset, a demand and a trace. ``algorithm:
"baseline"`` runs the same jobs straight against the sink with no control
plane at all.

Two execution modes exist. ``thread`` keeps every component in this
process; stages attach to their local controller in-process, and local
controllers still talk to the global controller over loopback. ``process``
runs each local controller and each job's stage+replayer in its own
process, connected only through sockets.

Outputs land in the run directory:

* ``jobs.csv``       second, job_id, submitted, completed (one row per job per second)
* ``controller.csv`` the global controller's per-cycle log (controlled runs only)
* ``summary.json``   completion times, makespan, peak aggregate, ceiling violations
* ``throughput.png`` per-job and aggregate completed ops/s
* ``manifest.json``  spec, status and the list of files written
"""

from __future__ import annotations

import csv
import json
import logging
import math
import multiprocessing as mp
import os
import threading
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..controller import GlobalController, Policy
from ..local import LocalController, StageLink, default_stage_info
from ..sinks import make_sink
from ..stage import Stage, StageInfo
from ..workload import (
    DEFAULT_MIX,
    BurstProfile,
    RateCurveTrace,
    Replayer,
    ReplayerConfig,
    SinkTarget,
    generate_synthetic_trace,
    load_traces,
    scaled_counts,
    split_by_mix,
)

log = logging.getLogger(__name__)

BASELINE = "baseline"
MODES = ("thread", "process")


class ScenarioError(ValueError):
    pass


@dataclass
class TraceSpec:
    """Where a job's load comes from.

    ``kind`` is ``synthetic`` (generated from a seed) or ``files`` (a
    directory of ``<optype>_log.txt`` curves). A synthetic curve is split
    into op types by ``mix`` unless a single ``op_type`` is given.
    """

    kind: str = "synthetic"
    seconds: int = 60
    mean_rate: float | None = None
    burst_prob: float = 0.05
    burst_multiplier: float = 5.0
    quiet_prob: float = 0.2
    seed: int | None = None
    op_type: str | None = None
    mix: dict[str, float] | None = None
    directory: str | None = None

    def build(self, mean_rate: float, seed: int) -> list[RateCurveTrace]:
        if self.kind == "files":
            if not self.directory:
                raise ScenarioError("file traces need a directory")
            traces = load_traces(self.directory)
            if not traces:
                raise ScenarioError(f"no *_log.txt traces in {self.directory}")
            return traces
        if self.kind != "synthetic":
            raise ScenarioError(f"unknown trace kind {self.kind!r}")
        profile = BurstProfile(self.burst_prob, self.burst_multiplier, self.quiet_prob)
        curve = generate_synthetic_trace(seed if self.seed is None else self.seed, self.seconds,
                                         mean_rate, profile)
        if self.op_type:
            return [RateCurveTrace(self.op_type, curve.samples)]
        return split_by_mix(curve.samples, self.mix or DEFAULT_MIX)


@dataclass
class JobSpec:
    job_id: str
    nodes: int = 1
    demand: float | None = None
    limit: float | None = None
    load_share: float | None = None
    start_offset_s: float = 0.0
    trace: TraceSpec = field(default_factory=TraceSpec)
    threads: int = 1
    rate_scale: float = 1.0
    time_compression: float = 60.0
    user_id: str = ""


@dataclass
class ScenarioSpec:
    max_rate: float
    algorithm: str = "psfa"
    jobs: list[JobSpec] = field(default_factory=list)
    loop_interval: float = 1.0
    epsilon: float = 0.5
    name: str = "scenario"
    total_load: float | None = None
    duration: float | None = None
    mode: str = "thread"
    seed: int = 0
    unit: str = "ops"
    channel: dict = field(default_factory=dict)
    uniform_rate: float | None = None
    max_jobs: int | None = None
    default_demand: float | None = None
    schedule: list[dict] = field(default_factory=list)
    burst_seconds: float = 0.1
    sink: str = "null"
    sink_root: str | None = None
    mountpoint: str = "/scratch"
    ready_timeout: float = 10.0
    # process mode only: time allowed for spawned interpreters to come up before t=0
    startup_grace_s: float = 5.0

    def validate(self) -> "ScenarioSpec":
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {MODES}")
        ids = [j.job_id for j in self.jobs]
        if len(set(ids)) != len(ids):
            raise ScenarioError("job ids must be unique")
        for j in self.jobs:
            if not j.job_id:
                raise ScenarioError("every job needs a job_id")
            if j.start_offset_s < 0:
                raise ScenarioError(f"job {j.job_id}: start_offset_s must be >= 0")
            if j.nodes < 1:
                raise ScenarioError(f"job {j.job_id}: nodes must be >= 1")
        shares = [j.load_share for j in self.jobs if j.load_share is not None]
        if shares:
            if len(shares) != len(self.jobs):
                raise ScenarioError("load_share must be given for all jobs or none")
            if not math.isclose(sum(shares), 1.0, abs_tol=1e-6):
                raise ScenarioError(f"load_shares sum to {sum(shares)}, not 1")
            if self.total_load is None:
                raise ScenarioError("load_share needs total_load")
        if self.burst_seconds <= 0:
            raise ScenarioError("burst_seconds must be > 0")
        for j in self.jobs:
            if j.trace.kind == "synthetic":
                self.mean_rate_for(j)
        if not self.controlled:
            return self
        try:
            self.policy()
        except ValueError as exc:
            raise ScenarioError(f"invalid policy: {exc}") from None
        return self

    @property
    def controlled(self) -> bool:
        return self.algorithm != BASELINE

    def policy(self) -> Policy:
        jobs = {}
        for j in self.jobs:
            entry = {}
            if j.demand is not None:
                entry["demand"] = j.demand
            if j.limit is not None:
                entry["limit"] = j.limit
            jobs[j.job_id] = entry
        data = dict(algorithm=self.algorithm, max_rate=self.max_rate, epsilon=self.epsilon,
                    loop_interval=self.loop_interval, jobs=jobs, unit=self.unit,
                    schedule=self.schedule)
        for name in ("uniform_rate", "max_jobs", "default_demand"):
            if getattr(self, name) is not None:
                data[name] = getattr(self, name)
        if self.channel:
            data["channel"] = self.channel
        return Policy.from_dict(data)

    def mean_rate_for(self, job: JobSpec) -> float:
        if job.trace.mean_rate is not None:
            return job.trace.mean_rate
        if job.load_share is not None:
            return self.total_load * job.load_share
        if self.total_load is not None and self.jobs:
            return self.total_load / len(self.jobs)
        raise ScenarioError(f"job {job.job_id}: no mean_rate, load_share or total_load")

    def traces_for(self, index: int) -> list[RateCurveTrace]:
        job = self.jobs[index]
        mean = self.mean_rate_for(job) if job.trace.kind == "synthetic" else 0.0
        return job.trace.build(mean, self.seed * 1000 + index)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        data = dict(data)
        jobs = []
        for raw in data.pop("jobs", []):
            raw = dict(raw)
            if "trace" in raw:
                raw["trace"] = TraceSpec(**raw["trace"])
            jobs.append(JobSpec(**raw))
        try:
            spec = cls(jobs=jobs, **data)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from None
        return spec.validate()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ScenarioSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class JobOutcome:
    job_id: str
    start_offset_s: float
    started: float | None = None
    finished: float | None = None
    submitted: list[int] = field(default_factory=list)
    completed: list[int] = field(default_factory=list)
    errors: int = 0
    drained: bool = True
    failure: str | None = None

    @property
    def completion_time(self) -> float | None:
        if self.finished is None:
            return None
        return self.finished - self.start_offset_s


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    outcomes: dict[str, JobOutcome]
    seconds: int
    aggregate: list[int]
    cycles: list = field(default_factory=list)
    failed: bool = False
    failure: str | None = None
    out_dir: Path | None = None

    @property
    def exceeded_max_rate(self) -> bool:
        return any(v > self.spec.max_rate for v in self.aggregate)

    @property
    def peak_aggregate(self) -> int:
        return max(self.aggregate, default=0)

    @property
    def makespan(self) -> float | None:
        done = [o.finished for o in self.outcomes.values() if o.finished is not None]
        return max(done) if done else None

    def summary(self) -> dict:
        return {
            "name": self.spec.name,
            "algorithm": self.spec.algorithm,
            "max_rate": self.spec.max_rate,
            "seconds": self.seconds,
            "failed": self.failed,
            "failure": self.failure,
            "makespan_s": self.makespan,
            "peak_aggregate": self.peak_aggregate,
            "exceeded_max_rate": self.exceeded_max_rate,
            "windows_over_max_rate": sum(1 for v in self.aggregate if v > self.spec.max_rate),
            "aggregate": list(self.aggregate),
            "cycles": len(self.cycles),
            "jobs": {
                j: {
                    "start_offset_s": o.start_offset_s,
                    "finished_s": o.finished,
                    "completion_time_s": o.completion_time,
                    "submitted": sum(o.submitted),
                    "completed": sum(o.completed),
                    "errors": o.errors,
                    "drained": o.drained,
                    "failure": o.failure,
                }
                for j, o in self.outcomes.items()
            },
        }


def _last_nonzero(series: list[int]) -> int | None:
    for i in range(len(series) - 1, -1, -1):
        if series[i]:
            return i
    return None


def _merge(into: list[int], other: list[int]) -> None:
    if len(other) > len(into):
        into.extend([0] * (len(other) - len(into)))
    for i, v in enumerate(other):
        into[i] += v


def _partition(traces: list[RateCurveTrace], parts: int) -> list[list[RateCurveTrace]]:
    """Split every curve across ``parts`` stages without losing or duplicating ops."""
    if parts == 1:
        return [traces]
    out: list[list[RateCurveTrace]] = [[] for _ in range(parts)]
    for t in traces:
        remaining = list(t.samples)
        for p in range(parts):
            share = scaled_counts(remaining, 1.0 / (parts - p))
            out[p].append(RateCurveTrace(t.op_type, tuple(share)))
            remaining = [r - s for r, s in zip(remaining, share)]
    return out


# -- one job ------------------------------------------------------------------------

def _replay_parts(job: JobSpec, parts: list[list[RateCurveTrace]], targets: list, epoch: float,
                  mountpoint: str):
    results = [None] * len(parts)

    def run(i: int) -> None:
        config = ReplayerConfig(parts[i], threads=job.threads, time_compression=job.time_compression,
                                rate_scale=job.rate_scale, job_id=job.job_id, user_id=job.user_id,
                                mountpoint=mountpoint, drain_timeout=None)
        results[i] = Replayer(config, targets[i], epoch=epoch).run()

    threads = [threading.Thread(target=run, args=(i,), daemon=True) for i in range(len(parts))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results


def _fold(outcome: JobOutcome, reports) -> None:
    for r in reports:
        _merge(outcome.submitted, r.per_second("submitted"))
        _merge(outcome.completed, r.per_second("completed"))
        outcome.errors += r.errors
        outcome.drained = outcome.drained and r.drained
        if r.aborted and outcome.failure is None:
            outcome.failure = r.aborted


def _run_job_threaded(spec: ScenarioSpec, index: int, epoch: float, sink, lcs, outcome: JobOutcome) -> None:
    job = spec.jobs[index]
    try:
        parts = _partition(spec.traces_for(index), job.nodes)
        delay = epoch + job.start_offset_s - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        outcome.started = time.monotonic() - epoch
        stages = []
        if spec.controlled:
            for n in range(job.nodes):
                lc = lcs[n]
                stage = Stage(StageInfo("", job.job_id, os.getpid() * 1000 + index * 64 + n,
                                        lc.node_id, job.user_id),
                              sink, [spec.mountpoint], burst_seconds=spec.burst_seconds)
                stage_id = lc.attach_stage(stage)
                stages.append((lc, stage_id, stage))
            for _, stage_id, stage in stages:
                if not stage.wait_ready(spec.ready_timeout):
                    raise TimeoutError(f"stage {stage_id} got no channel within {spec.ready_timeout}s")
            targets = [s for _, _, s in stages]
        else:
            targets = [SinkTarget(sink) for _ in range(job.nodes)]
        reports = _replay_parts(job, parts, targets, epoch, spec.mountpoint)
        _fold(outcome, reports)
        for lc, stage_id, stage in stages:
            lc.detach_stage(stage_id)
            stage.close()
    except Exception as exc:
        outcome.failure = f"{type(exc).__name__}: {exc}"
        log.error("job %s failed: %s", job.job_id, traceback.format_exc())


# -- process mode workers -------------------------------------------------------------

def _lc_process(node_id: str, upstream: str, loop_interval: float, conn, stop) -> None:
    try:
        lc = LocalController(node_id, "127.0.0.1:0", upstream, loop_interval=loop_interval)
        conn.send(lc.address)
        stop.wait()
        lc.close()
    except Exception as exc:
        conn.send(f"error: {exc}")


def _job_process(spec_dict: dict, index: int, node: int, part: list, addresses: list, epoch: float,
                 result_path: str) -> None:
    spec = ScenarioSpec.from_dict(spec_dict)
    job = spec.jobs[index]
    traces = [RateCurveTrace(op, tuple(samples)) for op, samples in part]
    out = {"submitted": [], "completed": [], "errors": 0, "drained": True, "failure": None,
           "started": None}
    link = None
    try:
        delay = epoch + job.start_offset_s - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        out["started"] = time.monotonic() - epoch
        sink = make_sink(spec.sink, spec.sink_root)
        if spec.controlled:
            stage = Stage(default_stage_info(job.job_id, job.user_id), sink, [spec.mountpoint],
                          burst_seconds=spec.burst_seconds)
            link = StageLink(stage, addresses[node])
            if not stage.wait_ready(spec.ready_timeout):
                raise TimeoutError(f"stage {link.stage_id} got no channel within {spec.ready_timeout}s")
            target = stage
        else:
            target = SinkTarget(sink)
        (report,) = _replay_parts(job, [traces], [target], epoch, spec.mountpoint)
        out.update(submitted=report.per_second("submitted"), completed=report.per_second("completed"),
                   errors=report.errors, drained=report.drained, failure=report.aborted)
    except Exception as exc:
        out["failure"] = f"{type(exc).__name__}: {exc}"
    finally:
        if link is not None:
            link.close()
        Path(result_path).write_text(json.dumps(out))


# -- driver ---------------------------------------------------------------------------

def _run_threaded(spec: ScenarioSpec, epoch: float, outcomes: dict, gc) -> str | None:
    sink = make_sink(spec.sink, spec.sink_root)
    lcs = []
    if spec.controlled:
        node_count = max((j.nodes for j in spec.jobs), default=0)
        lcs = [LocalController(f"node{n}", None, gc.address, loop_interval=spec.loop_interval)
               for n in range(node_count)]
        if not gc.wait_for_nodes(node_count):
            return "local controllers did not connect"
    threads = [threading.Thread(target=_run_job_threaded,
                                args=(spec, i, epoch, sink, lcs, outcomes[j.job_id]), daemon=True)
               for i, j in enumerate(spec.jobs)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for lc in lcs:
        lc.close()
    return None


def _run_processes(spec: ScenarioSpec, epoch: float, outcomes: dict, gc, out_dir: Path) -> str | None:
    ctx = mp.get_context("spawn")
    stop = ctx.Event()
    lc_procs, addresses = [], []
    node_count = max((j.nodes for j in spec.jobs), default=0)
    failure = None
    try:
        if spec.controlled:
            for n in range(node_count):
                parent, child = ctx.Pipe()
                p = ctx.Process(target=_lc_process,
                                args=(f"node{n}", gc.address, spec.loop_interval, child, stop),
                                daemon=True)
                p.start()
                lc_procs.append(p)
                if not parent.poll(30):
                    return f"local controller node{n} did not start"
                address = parent.recv()
                if address.startswith("error"):
                    return f"local controller node{n}: {address}"
                addresses.append(address)
            if not gc.wait_for_nodes(node_count):
                return "local controllers did not connect"
        jobs = []
        for i, job in enumerate(spec.jobs):
            parts = _partition(spec.traces_for(i), job.nodes)
            for n, part in enumerate(parts):
                path = out_dir / f".job-{i}-{n}.json"
                payload = [(t.op_type.value, list(t.samples)) for t in part]
                p = ctx.Process(target=_job_process,
                                args=(spec.to_dict(), i, n, payload, addresses, epoch, str(path)))
                p.start()
                jobs.append((job.job_id, p, path))
        for job_id, p, path in jobs:
            p.join()
            outcome = outcomes[job_id]
            if p.exitcode != 0 or not path.exists():
                outcome.failure = f"job process exited with code {p.exitcode}"
                failure = failure or f"job {job_id} crashed"
                continue
            data = json.loads(path.read_text())
            path.unlink()
            _merge(outcome.submitted, data["submitted"])
            _merge(outcome.completed, data["completed"])
            outcome.errors += data["errors"]
            outcome.drained = outcome.drained and data["drained"]
            if outcome.started is None or (data["started"] is not None and data["started"] < outcome.started):
                outcome.started = data["started"]
            if data["failure"] and outcome.failure is None:
                outcome.failure = data["failure"]
    finally:
        stop.set()
        for p in lc_procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
    return failure


def run_scenario(spec: ScenarioSpec, out_dir: str | os.PathLike | None = None, *,
                 plots: bool = True) -> ScenarioResult:
    """Run ``spec`` to completion and write its artifacts to ``out_dir``."""
    spec.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    outcomes = {j.job_id: JobOutcome(j.job_id, j.start_offset_s) for j in spec.jobs}
    gc = None
    failure = None
    wall_start = time.time()
    try:
        if spec.controlled and spec.jobs:
            log_path = str(out / "controller.csv") if out is not None else None
            gc = GlobalController(spec.policy(), log_path=log_path)
            gc.start()
        epoch = time.monotonic()
        if spec.mode == "process":
            epoch += spec.startup_grace_s
        if spec.jobs:
            if spec.mode == "thread":
                failure = _run_threaded(spec, epoch, outcomes, gc)
            else:
                failure = _run_processes(spec, epoch, outcomes, gc, out or Path("."))
        elapsed = max(0.0, time.monotonic() - epoch)
    except Exception as exc:
        failure = f"{type(exc).__name__}: {exc}"
        elapsed = time.monotonic() - epoch if "epoch" in locals() else 0.0
    finally:
        if gc is not None:
            gc.stop()
    if failure is None:
        bad = [o for o in outcomes.values() if o.failure]
        if bad:
            failure = f"job {bad[0].job_id}: {bad[0].failure}"

    seconds = 0
    if spec.jobs:
        seconds = int(spec.duration) if spec.duration is not None else int(math.ceil(elapsed))
    for o in outcomes.values():
        for series in (o.submitted, o.completed):
            if len(series) < seconds:
                series.extend([0] * (seconds - len(series)))
            del series[seconds:]
        last = _last_nonzero(o.completed)
        o.finished = None if last is None else float(last + 1)
    aggregate = [sum(o.completed[s] for o in outcomes.values()) for s in range(seconds)]
    result = ScenarioResult(spec, outcomes, seconds, aggregate,
                            cycles=list(gc.reports) if gc is not None else [],
                            failed=failure is not None, failure=failure, out_dir=out)
    if out is not None:
        write_artifacts(result, out, plots=plots, wall_start=wall_start)
    return result


def _run_for_summary(spec_dict: dict, out_dir: str | None, plots: bool) -> dict:
    return run_scenario(ScenarioSpec.from_dict(spec_dict), out_dir, plots=plots).summary()


def run_scenarios(specs: list[ScenarioSpec], out_root: str | os.PathLike | None = None, *,
                  parallel: int = 1, plots: bool = True) -> list[dict]:
    """Run several specs, up to ``parallel`` at once in separate processes.

    Returns each run's :meth:`ScenarioResult.summary` in input order. With an
    ``out_root`` every run writes its artifacts to ``out_root/<name>``.
    """
    dirs = []
    for spec in specs:
        spec.validate()
        dirs.append(None if out_root is None else str(Path(out_root) / spec.name))
    if len(set(d for d in dirs if d)) != len([d for d in dirs if d]):
        raise ScenarioError("scenario names must be unique within one batch")
    if parallel <= 1:
        return [_run_for_summary(s.to_dict(), d, plots) for s, d in zip(specs, dirs)]
    with ProcessPoolExecutor(max_workers=parallel, mp_context=mp.get_context("spawn")) as pool:
        futures = [pool.submit(_run_for_summary, s.to_dict(), d, plots) for s, d in zip(specs, dirs)]
        return [f.result() for f in futures]


def write_artifacts(result: ScenarioResult, out: Path, *, plots: bool = True,
                    wall_start: float | None = None) -> list[str]:
    files = ["jobs.csv", "summary.json"]
    with open(out / "jobs.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("second", "job_id", "submitted", "completed"))
        for s in range(result.seconds):
            for job_id, o in result.outcomes.items():
                w.writerow((s, job_id, o.submitted[s], o.completed[s]))
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=2))
    if (out / "controller.csv").exists():
        files.append("controller.csv")
    if plots and result.seconds > 0:
        from .plotting import plot_scenario
        files.append(plot_scenario(result, out / "throughput.png").name)
    manifest = {
        "name": result.spec.name,
        "status": "failed" if result.failed else "ok",
        "failure": result.failure,
        "started_at": wall_start,
        "spec": result.spec.to_dict(),
        "files": files + ["manifest.json"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest["files"]
