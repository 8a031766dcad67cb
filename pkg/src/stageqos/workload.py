"""Rate-curve traces, a synthetic volatile trace generator and the replayer.

A trace is a per-second curve of how many operations of one type to submit.
The replayer turns a set of traces into requests, spreading each second's
operations evenly within the second and round-robining them over worker
threads, and records how many were submitted and completed every second.
"""

from __future__ import annotations

import csv
import heapq
import logging
import math
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .requests import OpType, Request

log = logging.getLogger(__name__)

TRACE_SUFFIX = "_log.txt"

# operation shares of the characterized production metadata load
DEFAULT_MIX = {"getattr": 0.47, "close": 0.21, "open": 0.14, "rename": 0.16, "other": 0.02}
OTHER_OP = OpType.UNLINK


@dataclass(frozen=True)
class RateCurveTrace:
    op_type: OpType
    samples: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "op_type", OpType(self.op_type))
        samples = tuple(int(s) for s in self.samples)
        if not samples:
            raise ValueError("a trace needs at least one sample")
        if min(samples) < 0:
            raise ValueError("trace samples must be >= 0")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def total(self) -> int:
        return sum(self.samples)

    @property
    def filename(self) -> str:
        return f"{self.op_type.value}{TRACE_SUFFIX}"

    def save(self, directory: str | os.PathLike) -> Path:
        path = Path(directory) / self.filename
        path.write_text("".join(f"{s}\n" for s in self.samples))
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RateCurveTrace":
        path = Path(path)
        if not path.name.endswith(TRACE_SUFFIX):
            raise ValueError(f"{path.name}: trace files are named <optype>{TRACE_SUFFIX}")
        op = path.name[: -len(TRACE_SUFFIX)]
        samples = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            try:
                samples.append(int(line))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not an integer: {line!r}") from None
        return cls(OpType(op), tuple(samples))


def load_traces(directory: str | os.PathLike) -> list[RateCurveTrace]:
    return [RateCurveTrace.load(p) for p in sorted(Path(directory).glob(f"*{TRACE_SUFFIX}"))]


@dataclass(frozen=True)
class BurstProfile:
    """Per-second chances of a burst or a quiet second, and how big bursts are."""

    burst_prob: float = 0.05
    burst_multiplier: float = 5.0
    quiet_prob: float = 0.2

    def __post_init__(self):
        for name in ("burst_prob", "quiet_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")
        if self.burst_prob + self.quiet_prob > 1.0:
            raise ValueError("burst_prob + quiet_prob must be <= 1")
        if self.burst_multiplier < 1.0:
            raise ValueError("burst_multiplier must be >= 1")


QUIET_CEILING = 0.25


def generate_synthetic_trace(seed: int, duration_s: int, mean_rate: float,
                             profile: BurstProfile = BurstProfile(), *,
                             op_type: OpType | str = OpType.GETATTR, jitter: float = 0.1) -> RateCurveTrace:
    """Volatile per-second curve: quiet stretches, a noisy base level and bursts.

    Each second is independently a burst (``burst_multiplier`` to 1.5x that
    times the mean), a quiet second (at most a quarter of the mean) or a
    normal second. The normal level is solved for so that the expected mean
    equals ``mean_rate``; the normal seconds are then rescaled so the
    realised mean matches too whenever the draw leaves room for it.

    Raises ValueError when bursts alone would already exceed the mean.
    """
    if duration_s < 1:
        raise ValueError("duration_s must be >= 1")
    if mean_rate < 0:
        raise ValueError("mean_rate must be >= 0")
    rng = np.random.default_rng(seed)
    u = rng.random(duration_s)
    burst = u < profile.burst_prob
    quiet = (~burst) & (u < profile.burst_prob + profile.quiet_prob)
    normal = ~(burst | quiet)

    burst_level = mean_rate * profile.burst_multiplier * rng.uniform(1.0, 1.5, duration_s)
    quiet_level = mean_rate * QUIET_CEILING * rng.uniform(0.0, 1.0, duration_s)
    noise = np.clip(rng.normal(1.0, jitter, duration_s), 0.3, 1.7)

    normal_prob = 1.0 - profile.burst_prob - profile.quiet_prob
    expected_other = (profile.burst_prob * mean_rate * profile.burst_multiplier * 1.25
                      + profile.quiet_prob * mean_rate * QUIET_CEILING * 0.5)
    if normal_prob > 0:
        base = (mean_rate - expected_other) / normal_prob
        if base < 0:
            raise ValueError("burst settings exceed the requested mean; lower burst_prob or burst_multiplier")
    else:
        base = 0.0

    values = np.where(burst, burst_level, np.where(quiet, quiet_level, base * noise))
    if normal.any():
        fixed = values[~normal].sum()
        wanted = mean_rate * duration_s - fixed
        current = values[normal].sum()
        if wanted > 0 and current > 0:
            scaled = values[normal] * (wanted / current)
            # keep normal seconds distinguishable from quiet seconds and bursts
            lo = mean_rate * QUIET_CEILING
            hi = mean_rate * profile.burst_multiplier
            values[normal] = np.clip(scaled, lo, hi) if hi > lo else scaled
    samples = np.rint(values).astype(np.int64)
    return RateCurveTrace(OpType(op_type), tuple(int(s) for s in samples))


def mix_report(traces: Iterable[RateCurveTrace]) -> dict[str, float]:
    """Fraction of all operations contributed by each op type."""
    counts: Counter[str] = Counter()
    for t in traces:
        counts[t.op_type.value] += t.total
    total = sum(counts.values())
    if total == 0:
        return {op: 0.0 for op in counts}
    return {op: n / total for op, n in counts.items()}


def split_by_mix(curve: Sequence[int], mix: Mapping[str, float] = DEFAULT_MIX) -> list[RateCurveTrace]:
    """Split one aggregate curve into per-op-type traces following ``mix``.

    Each second is apportioned with the largest-remainder method so the parts
    add up to the aggregate exactly. The ``other`` share maps to unlink.
    """
    names = list(mix)
    weights = np.array([mix[n] for n in names], dtype=float)
    if (weights < 0).any() or weights.sum() <= 0:
        raise ValueError("mix weights must be non-negative and not all zero")
    weights = weights / weights.sum()
    per_op = np.zeros((len(names), len(curve)), dtype=np.int64)
    for s, total in enumerate(curve):
        exact = weights * total
        floor = np.floor(exact).astype(np.int64)
        short = int(total - floor.sum())
        order = np.argsort(-(exact - floor), kind="stable")
        floor[order[:short]] += 1
        per_op[:, s] = floor
    traces = []
    for name, row in zip(names, per_op):
        op = OTHER_OP if name == "other" else OpType(name)
        traces.append(RateCurveTrace(op, tuple(int(v) for v in row)))
    return traces


# -- replay --------------------------------------------------------------------

@dataclass
class ReplayerConfig:
    """How to replay a set of traces.

    ``time_compression`` is how many seconds of the original recording one
    replay second stands for; a sample of a trace recorded per minute lasts
    ``60 / time_compression`` replay seconds. ``rate_scale`` multiplies every
    sample.
    """

    traces: list[RateCurveTrace]
    threads: int = 1
    time_compression: float = 60.0
    rate_scale: float = 1.0
    job_id: str = ""
    user_id: str = ""
    mountpoint: str = "/scratch"
    files: int = 256
    drain_timeout: float | None = 60.0

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not self.time_compression > 0:
            raise ValueError("time_compression must be > 0")
        if not self.rate_scale > 0:
            raise ValueError("rate_scale must be > 0")

    @property
    def sample_period(self) -> float:
        return 60.0 / self.time_compression

    @property
    def seconds(self) -> int:
        return max((len(t) for t in self.traces), default=0)


def scaled_counts(samples: Sequence[int], scale: float) -> list[int]:
    """``samples * scale`` rounded with carry so the total is preserved."""
    out = []
    carry = 0.0
    for s in samples:
        exact = s * scale + carry
        n = int(math.floor(exact + 1e-9))
        carry = exact - n
        out.append(n)
    return out


def schedule_for_sample(counts: Mapping[OpType, int]) -> list[tuple[float, OpType]]:
    """Offsets within one sample period, as fractions in [0, 1), for each op.

    Each op type's operations sit at evenly spaced offsets; types are merged
    by offset, which interleaves them in proportion to their counts.
    """
    streams = [[((k + 0.5) / n, op) for k in range(n)] for op, n in counts.items() if n > 0]
    return list(heapq.merge(*streams, key=lambda x: x[0]))


@dataclass
class ReplayReport:
    op_types: tuple[str, ...]
    submitted: dict[str, list[int]]
    completed: dict[str, list[int]]
    errors: int = 0
    duration: float = 0.0
    drained: bool = True
    aborted: str | None = None

    @property
    def total_submitted(self) -> int:
        return sum(sum(v) for v in self.submitted.values())

    @property
    def total_completed(self) -> int:
        return sum(sum(v) for v in self.completed.values())

    def per_second(self, kind: str = "completed") -> list[int]:
        series = getattr(self, kind)
        n = max((len(v) for v in series.values()), default=0)
        return [sum(v[i] for v in series.values() if i < len(v)) for i in range(n)]

    def rows(self) -> list[tuple[int, str, int, int]]:
        n = max([len(v) for v in self.submitted.values()] + [len(v) for v in self.completed.values()] + [0])
        out = []
        for s in range(n):
            for op in self.op_types:
                sub = self.submitted[op]
                com = self.completed[op]
                out.append((s, op, sub[s] if s < len(sub) else 0, com[s] if s < len(com) else 0))
        return out

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("second", "op_type", "submitted", "completed"))
            w.writerows(self.rows())


class _Counters:
    """Per-second submitted/completed counts, shared by workers and callbacks."""

    def __init__(self, ops: Sequence[str], start: float):
        self.start = start
        self.submitted = {op: [] for op in ops}
        self.completed = {op: [] for op in ops}
        self.outstanding = 0
        self.errors = 0
        self.lock = threading.Lock()
        self.idle = threading.Condition(self.lock)

    @staticmethod
    def _bump(series: list, second: int) -> None:
        if second >= len(series):
            series.extend([0] * (second + 1 - len(series)))
        series[second] += 1

    def on_submit(self, op: str, now: float) -> None:
        with self.lock:
            self._bump(self.submitted[op], int(now - self.start))
            self.outstanding += 1

    def on_complete(self, op: str, now: float, failed: bool) -> None:
        with self.lock:
            self._bump(self.completed[op], int(now - self.start))
            self.outstanding -= 1
            if failed:
                self.errors += 1
            if self.outstanding == 0:
                self.idle.notify_all()


class SinkTarget:
    """Adapter giving a bare sink the stage's ``submit_nowait`` interface."""

    def __init__(self, sink):
        self.sink = sink

    def submit_nowait(self, request: Request, callback: Callable) -> None:
        try:
            result = self.sink.apply(request)
            error = None
        except Exception as exc:
            result, error = None, exc
        callback((request, None, 0, 0, result, error))


class Replayer:
    """Replays traces against anything offering ``submit_nowait(request, callback)``.

    Worker *t* of *n* handles operations t, t+n, t+2n, ... of every sample
    period, sleeping until each one's scheduled instant. Completions are
    counted in the second they arrive, so a throttled target shows its
    backlog draining after the input has stopped.

    Seconds are counted from ``epoch`` when given (a ``clock`` reading), so
    several replayers can share one time axis; otherwise from the start of
    :meth:`run`.
    """

    def __init__(self, config: ReplayerConfig, target, *, clock: Callable[[], float] = time.monotonic,
                 epoch: float | None = None):
        self.config = config
        self.target = target
        self.clock = clock
        self.epoch = epoch
        self._stop = threading.Event()
        self._fds: list[int] = []
        self._fd_lock = threading.Lock()
        # path-based requests are immutable and repeat every ``files`` ops
        self._cache: dict[tuple[OpType, int], Request] = {}

    def stop(self) -> None:
        self._stop.set()

    def _path(self, k: int) -> str:
        c = self.config
        sub = c.job_id or "job"
        return f"{c.mountpoint}/{sub}/f{k % c.files}"

    def _request(self, op: OpType, k: int) -> Request:
        c = self.config
        if op is OpType.CLOSE:
            with self._fd_lock:
                fd = self._fds.pop() if self._fds else None
            if fd is not None:
                return Request(op, fd, user_id=c.user_id, job_id=c.job_id)
        key = (op, k % c.files)
        request = self._cache.get(key)
        if request is None:
            request = self._cache[key] = self._build(op, k)
        return request

    def _build(self, op: OpType, k: int) -> Request:
        c = self.config
        if op in (OpType.READ, OpType.WRITE):
            return Request(op, self._path(k), size=4096, user_id=c.user_id, job_id=c.job_id)
        if op is OpType.RENAME:
            return Request(op, self._path(k), user_id=c.user_id, job_id=c.job_id, dest=self._path(k + 1))
        return Request(op, self._path(k), user_id=c.user_id, job_id=c.job_id)

    def plan(self) -> list[list[tuple[float, OpType]]]:
        """Per sample period, the (offset seconds, op) schedule before thread partitioning."""
        c = self.config
        per_op = {t.op_type: scaled_counts(t.samples, c.rate_scale) for t in c.traces}
        period = c.sample_period
        plan = []
        for s in range(c.seconds):
            counts = {op: v[s] for op, v in per_op.items() if s < len(v)}
            plan.append([(f * period, op) for f, op in schedule_for_sample(counts)])
        return plan

    def run(self) -> ReplayReport:
        c = self.config
        ops = tuple(dict.fromkeys(t.op_type.value for t in c.traces))
        plan = self.plan()
        start = self.clock()
        counters = _Counters(ops, start if self.epoch is None else self.epoch)
        aborted: list[str] = []

        def worker(index: int) -> None:
            clock = self.clock
            submit = self.target.submit_nowait
            k = 0
            for s, schedule in enumerate(plan):
                base = start + s * c.sample_period
                for j in range(index, len(schedule), c.threads):
                    if self._stop.is_set():
                        return
                    offset, op = schedule[j]
                    due = base + offset
                    ahead = due - clock()
                    if ahead > 0.001:
                        time.sleep(ahead)
                    request = self._request(op, k * c.threads + index)
                    k += 1
                    name = op.value
                    counters.on_submit(name, clock())

                    def done(record, name=name, op=op):
                        result, error = record[4], record[5]
                        if op is OpType.OPEN and isinstance(result, int) and error is None:
                            with self._fd_lock:
                                self._fds.append(result)
                        counters.on_complete(name, clock(), error is not None)

                    try:
                        submit(request, done)
                    except Exception as exc:
                        aborted.append(f"{type(exc).__name__}: {exc}")
                        counters.on_complete(name, clock(), True)
                        self._stop.set()
                        return

        threads = [threading.Thread(target=worker, args=(i,), name=f"replay-{i}", daemon=True)
                   for i in range(c.threads)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        # keep the clock running to the end of the last sample even if it was quiet
        end_of_input = start + len(plan) * c.sample_period
        while not self._stop.is_set() and self.clock() < end_of_input:
            time.sleep(min(0.05, max(0.0, end_of_input - self.clock())))
        with counters.lock:
            deadline = None if c.drain_timeout is None else self.clock() + c.drain_timeout
            while counters.outstanding > 0:
                remaining = None if deadline is None else deadline - self.clock()
                if remaining is not None and remaining <= 0:
                    break
                counters.idle.wait(remaining if remaining is None else min(remaining, 0.1))
            drained = counters.outstanding == 0
            submitted = {op: list(v) for op, v in counters.submitted.items()}
            completed = {op: list(v) for op, v in counters.completed.items()}
            errors = counters.errors
        duration = self.clock() - start
        # pad every series to the same length so rows line up per second
        n = max(int(math.ceil(self.clock() - counters.start)), len(plan))
        for series in (submitted, completed):
            for v in series.values():
                v.extend([0] * (n - len(v)))
        return ReplayReport(ops, submitted, completed, errors, duration, drained,
                            aborted[0] if aborted else None)


def replay(config: ReplayerConfig, target) -> ReplayReport:
    return Replayer(config, target).run()
