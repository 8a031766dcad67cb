"""Global controller: job registry and the collect/compute/enforce/sleep loop.

Local controllers connect to the global controller and forward stage
registrations. Every cycle the controller polls all of them for stage
counters, turns those into per-job usage, runs the configured allocation
algorithm, splits each job's rate across its stages and pushes the
resulting rules back down.

Policies are JSON documents, for example::

    {
      "algorithm": "psfa",
      "max_rate": 11000,
      "epsilon": 0.5,
      "loop_interval": 1.0,
      "jobs": {"j1": {"demand": 1500}, "j2": {"demand": 2500}},
      "channel": {"granularity": "job", "value": "$job"},
      "schedule": [{"at": 360, "uniform_rate": 10000}]
    }

``schedule`` entries override top-level fields once ``at`` seconds have
passed since the controller started.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

from . import protocol as proto
from .algorithms import (
    ALGORITHMS,
    AllocationError,
    ControlConfig,
    JobState,
    check_priority_limits,
    psfa_breakdown,
)
from .protocol import CollectReq, Connection, RegisterAck, RegisterStage, Rule, SetPolicy, PolicyAck
from .requests import Granularity
from .stage import CreateChannel, HousekeepingRule, SetChannelRate

log = logging.getLogger(__name__)

DEFAULT_CHANNEL_ID = 1
UNITS = ("ops", "bytes")

CSV_HEADER = ("timestamp", "job_id", "usage", "assigned_rate", "cycle_latency_ns")


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class JobPolicy:
    demand: float | None = None
    limit: float | None = None


@dataclass(frozen=True)
class ChannelSpec:
    """What the per-stage channel matches. ``$job`` and ``$user`` expand per stage."""

    granularity: Granularity = Granularity.JOB
    value: str = "$job"
    channel_id: int = DEFAULT_CHANNEL_ID

    def __post_init__(self):
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        if self.channel_id < 1:
            raise PolicyError("channel_id must be >= 1")

    def value_for(self, job_id: str, user_id: str) -> str:
        return self.value.replace("$job", job_id).replace("$user", user_id)


_OVERRIDABLE = ("algorithm", "max_rate", "epsilon", "loop_interval", "default_demand",
                "uniform_rate", "max_jobs", "jobs")


@dataclass(frozen=True)
class Policy:
    algorithm: str = "psfa"
    max_rate: float = 1.0
    epsilon: float = 0.5
    loop_interval: float = 1.0
    jobs: dict[str, JobPolicy] = field(default_factory=dict)
    default_demand: float | None = None
    uniform_rate: float | None = None
    max_jobs: int | None = None
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    unit: str = "ops"
    schedule: tuple[dict, ...] = ()

    @property
    def config(self) -> ControlConfig:
        return ControlConfig(self.max_rate, self.epsilon, self.loop_interval)

    def demand_for(self, job_id: str) -> float:
        jp = self.jobs.get(job_id)
        if jp is not None and jp.demand is not None:
            return jp.demand
        if jp is not None and jp.limit is not None:
            return jp.limit
        return self.default_demand if self.default_demand is not None else self.max_rate

    def limit_for(self, job_id: str) -> float:
        jp = self.jobs.get(job_id)
        if jp is not None and jp.limit is not None:
            return jp.limit
        return self.demand_for(job_id)

    def validate(self) -> "Policy":
        """Raise PolicyError unless this policy and every scheduled step is usable."""
        self._validate_one()
        for step in self.schedule:
            if "at" not in step or step["at"] < 0:
                raise PolicyError("schedule entries need a non-negative 'at'")
            unknown = set(step) - set(_OVERRIDABLE) - {"at"}
            if unknown:
                raise PolicyError(f"schedule entry overrides unknown fields {sorted(unknown)}")
        for step in self.schedule:
            self.at(step["at"])._validate_one()
        return self

    def _validate_one(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise PolicyError(f"unknown algorithm {self.algorithm!r}; expected one of {sorted(ALGORITHMS)}")
        if self.unit not in UNITS:
            raise PolicyError(f"unit must be one of {UNITS}")
        try:
            self.config
        except AllocationError as exc:
            raise PolicyError(str(exc)) from None
        for job_id, jp in self.jobs.items():
            for name in ("demand", "limit"):
                value = getattr(jp, name)
                if value is not None and not value > 0:
                    raise PolicyError(f"job {job_id}: {name} must be > 0")
        if self.default_demand is not None and not self.default_demand > 0:
            raise PolicyError("default_demand must be > 0")
        if self.uniform_rate is not None and self.uniform_rate < 0:
            raise PolicyError("uniform_rate must be >= 0")
        if self.max_jobs is not None and self.max_jobs < 1:
            raise PolicyError("max_jobs must be >= 1")
        if self.algorithm == "priority":
            try:
                check_priority_limits(self.config, (self.limit_for(j) for j in self.jobs))
            except AllocationError as exc:
                raise PolicyError(str(exc)) from None

    def at(self, elapsed: float) -> "Policy":
        """The policy in force ``elapsed`` seconds after start."""
        current = self
        for step in sorted(self.schedule, key=lambda s: s["at"]):
            if step["at"] > elapsed:
                break
            overrides = {k: v for k, v in step.items() if k != "at"}
            if "jobs" in overrides:
                overrides["jobs"] = _jobs_from(overrides["jobs"])
            current = replace(current, **overrides)
        return current

    @classmethod
    def from_dict(cls, data: dict) -> "Policy":
        data = dict(data)
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise PolicyError(f"unknown policy fields {sorted(unknown)}")
        if "jobs" in data:
            data["jobs"] = _jobs_from(data["jobs"])
        if "channel" in data:
            try:
                data["channel"] = ChannelSpec(**data["channel"])
            except (TypeError, ValueError) as exc:
                raise PolicyError(f"bad channel spec: {exc}") from None
        if "schedule" in data:
            data["schedule"] = tuple(dict(s) for s in data["schedule"])
        try:
            policy = cls(**data)
        except TypeError as exc:
            raise PolicyError(str(exc)) from None
        return policy.validate()

    @classmethod
    def from_json(cls, text: str) -> "Policy":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise PolicyError(f"policy is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise PolicyError("policy must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["jobs"] = {k: {n: v for n, v in asdict(jp).items() if v is not None}
                       for k, jp in self.jobs.items()}
        out["channel"]["granularity"] = self.channel.granularity.value
        out["schedule"] = [dict(s) for s in self.schedule]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _jobs_from(raw) -> dict[str, JobPolicy]:
    jobs = {}
    for job_id, spec in dict(raw).items():
        if isinstance(spec, JobPolicy):
            jobs[job_id] = spec
        elif isinstance(spec, (int, float)):
            jobs[job_id] = JobPolicy(demand=float(spec))
        else:
            try:
                jobs[job_id] = JobPolicy(**spec)
            except TypeError as exc:
                raise PolicyError(f"job {job_id}: {exc}") from None
    return jobs


def split_job_rate(job_rate: float, usages: Sequence[float]) -> list[float]:
    """Split a job's rate across its stages in proportion to their usage.

    Falls back to an equal split when no stage used anything. The last stage
    takes whatever rounding left over so the parts add back up to
    ``job_rate``.
    """
    if job_rate < 0:
        raise ValueError("job_rate must be >= 0")
    n = len(usages)
    if n == 0:
        raise ValueError("a job needs at least one stage")
    total = math.fsum(usages)
    if total > 0:
        head = [job_rate * u / total for u in usages[:-1]]
    else:
        head = [job_rate / n] * (n - 1)
    last = job_rate - math.fsum(head)
    return head + [last if last > 0 else 0.0]


@dataclass
class StageMember:
    node: str
    stage_id: str
    job_id: str
    user_id: str = ""
    usage: float = 0.0
    rate: float = 0.0
    installed: bool = False


@dataclass
class JobRecord:
    job_id: str
    members: dict[tuple[str, str], StageMember] = field(default_factory=dict)
    usage: float = 0.0
    rate: float = 0.0
    flagged: bool = False


@dataclass(frozen=True)
class RuleRecord:
    node: str
    stage_id: str
    action: HousekeepingRule
    ok: bool = True
    detail: str = ""


@dataclass(frozen=True)
class CycleReport:
    index: int
    timestamp: float
    elapsed: float
    algorithm: str
    usages: dict[str, float]
    rates: dict[str, float]
    pre_rates: dict[str, float] | None
    rules: tuple[RuleRecord, ...]
    unreachable: tuple[str, ...]
    latency_ns: int

    @property
    def total_rate(self) -> float:
        return math.fsum(self.rates.values())


class _Node:
    __slots__ = ("node_id", "conn")

    def __init__(self, node_id: str, conn: Connection):
        self.node_id = node_id
        self.conn = conn


class GlobalController:
    """Job registry plus the control loop.

    Args:
        policy: Initial policy.
        listen_address: Where local controllers connect.
        log_path: Optional CSV file receiving one row per job per cycle.
        collect_timeout: How long a cycle waits for local controllers;
            defaults to half the loop interval.
        keep_reports: How many recent cycle reports to retain (None keeps all).

    The loop starts with :meth:`start`; tests and benchmarks may instead call
    :meth:`control_cycle` directly.
    """

    def __init__(self, policy: Policy, listen_address: str = "127.0.0.1:0", *,
                 log_path: str | None = None, collect_timeout: float | None = None,
                 keep_reports: int | None = None):
        self.policy = policy.validate()
        self.collect_timeout = collect_timeout
        self.jobs: dict[str, JobRecord] = {}
        self.nodes: dict[str, _Node] = {}
        self.reports: list[CycleReport] = []
        self.keep_reports = keep_reports
        self.cycles = 0
        self._node_ids = itertools.count()
        self._inbox: queue.SimpleQueue = queue.SimpleQueue()
        self._nodes_lock = threading.Lock()
        self._wake = threading.Event()
        self._stop = threading.Event()
        self._listener = proto.listen(listen_address)
        self.address = proto.bound_address(self._listener)
        self._acceptor = threading.Thread(target=self._accept_loop, name="gc-accept", daemon=True)
        self._acceptor.start()
        self._loop: threading.Thread | None = None
        self._started_at = time.monotonic()
        self._log_file = None
        self._log = None
        if log_path is not None:
            self._log_file = open(log_path, "w", newline="")
            self._log = csv.writer(self._log_file)
            self._log.writerow(CSV_HEADER)

    # -- connections -------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            node_id = f"lc{next(self._node_ids)}"
            conn = Connection(sock, lambda msg, n=node_id: self._handle(n, msg),
                              on_close=lambda c, n=node_id: self._on_node_close(n),
                              name=f"gc-{node_id}")
            with self._nodes_lock:
                self.nodes[node_id] = _Node(node_id, conn)
            conn.start()

    def _on_node_close(self, node_id: str) -> None:
        with self._nodes_lock:
            self.nodes.pop(node_id, None)
        self._inbox.put(("node_gone", node_id))
        self._wake.set()

    def _handle(self, node_id: str, msg):
        if isinstance(msg, RegisterStage):
            try:
                msg.info.validate()
            except ValueError as exc:
                return RegisterAck(proto.STATUS_ERROR, "", str(exc))
            if not msg.info.stage_id:
                return RegisterAck(proto.STATUS_ERROR, "", "stage_id must be assigned by the local controller")
            self._inbox.put(("register", node_id, msg.info))
            self._wake.set()
            return RegisterAck(proto.STATUS_OK, msg.info.stage_id, "")
        if isinstance(msg, SetPolicy):
            try:
                self.set_policy(Policy.from_json(msg.policy))
            except PolicyError as exc:
                return PolicyAck(proto.STATUS_ERROR, str(exc))
            return PolicyAck(proto.STATUS_OK, "")
        raise proto.ProtocolError(f"global controller cannot serve {type(msg).__name__}")

    def node_count(self) -> int:
        with self._nodes_lock:
            return len(self.nodes)

    def wait_for_nodes(self, count: int, timeout: float = 10.0) -> bool:
        deadline = time.monotonic() + timeout
        while self.node_count() < count:
            if time.monotonic() > deadline:
                return False
            time.sleep(0.005)
        return True

    # -- policy --------------------------------------------------------------

    def set_policy(self, policy: Policy) -> None:
        """Validate ``policy`` and make it current from the next cycle on.

        Raises PolicyError, leaving the old policy in place, when invalid.
        """
        policy.validate()
        self._inbox.put(("policy", policy))

    def effective_policy(self, elapsed: float | None = None) -> Policy:
        if elapsed is None:
            elapsed = time.monotonic() - self._started_at
        return self.policy.at(elapsed)

    # -- registry ------------------------------------------------------------

    def _drain_inbox(self) -> None:
        while True:
            try:
                item = self._inbox.get_nowait()
            except queue.Empty:
                return
            kind = item[0]
            if kind == "register":
                _, node_id, info = item
                job = self.jobs.get(info.job_id)
                if job is None:
                    job = self.jobs[info.job_id] = JobRecord(info.job_id)
                job.members[(node_id, info.stage_id)] = StageMember(
                    node_id, info.stage_id, info.job_id, info.user_id)
            elif kind == "node_gone":
                self._remove_members(lambda m, n=item[1]: m.node == n)
            elif kind == "policy":
                self.policy = item[1]

    def _remove_members(self, predicate) -> None:
        for job_id in list(self.jobs):
            job = self.jobs[job_id]
            for key in [k for k, m in job.members.items() if predicate(m)]:
                del job.members[key]
            if not job.members:
                del self.jobs[job_id]

    # -- the loop ------------------------------------------------------------

    def _collect(self, policy: Policy) -> list[str]:
        with self._nodes_lock:
            nodes = list(self.nodes.values())
        timeout = self.collect_timeout if self.collect_timeout is not None else policy.loop_interval / 2
        deadline = time.monotonic() + timeout
        slots = []
        unreachable = []
        for node in nodes:
            try:
                slots.append((node, node.conn.request_async(CollectReq())))
            except ConnectionError:
                unreachable.append(node.node_id)
        for job in self.jobs.values():
            job.flagged = False
            for m in job.members.values():
                m.usage = 0.0
        use_bytes = policy.unit == "bytes"
        gone = set()
        for node, slot in slots:
            try:
                resp = slot.wait(max(0.0, deadline - time.monotonic()))
            except (TimeoutError, ConnectionError):
                unreachable.append(node.node_id)
                continue
            for e in resp.entries:
                job = self.jobs.get(e.job_id)
                member = job.members.get((node.node_id, e.stage_id)) if job else None
                if member is None:
                    continue
                if e.gone:
                    gone.add((node.node_id, e.stage_id))
                    continue
                if e.stale:
                    job.flagged = True
                if e.window_ns > 0:
                    member.usage += (e.bytes if use_bytes else e.ops) * 1e9 / e.window_ns
        if gone:
            self._remove_members(lambda m: (m.node, m.stage_id) in gone)
        for job in self.jobs.values():
            if any(m.node in unreachable for m in job.members.values()):
                job.flagged = True
            job.usage = math.fsum(m.usage for m in job.members.values())
        return unreachable

    def _compute(self, policy: Policy) -> tuple[dict[str, float], dict[str, float] | None]:
        if not self.jobs:
            return {}, None
        config = policy.config
        if policy.algorithm == "priority":
            states = [JobState(j, policy.limit_for(j), rec.usage) for j, rec in self.jobs.items()]
        else:
            states = [JobState(j, policy.demand_for(j), rec.usage) for j, rec in self.jobs.items()]
        if policy.algorithm == "psfa":
            breakdown = psfa_breakdown(config, states)
            return breakdown.rates, breakdown.pre_rates
        if policy.algorithm == "uniform":
            max_jobs = policy.max_jobs or (len(policy.jobs) or None)
            return ALGORITHMS["uniform"](config, states, per_job_rate=policy.uniform_rate,
                                         max_jobs=max_jobs), None
        return ALGORITHMS[policy.algorithm](config, states), None

    def _enforce(self, policy: Policy, rates: dict[str, float]) -> list[RuleRecord]:
        per_node: dict[str, list[tuple[StageMember, HousekeepingRule]]] = {}
        spec = policy.channel
        for job_id, job in self.jobs.items():
            job.rate = rates.get(job_id, 0.0)
            members = list(job.members.values())
            for member, rate in zip(members, split_job_rate(job.rate, [m.usage for m in members])):
                member.rate = rate
                if member.installed:
                    action = SetChannelRate(spec.channel_id, rate)
                else:
                    action = CreateChannel(spec.channel_id, spec.granularity,
                                           spec.value_for(job_id, member.user_id), rate)
                per_node.setdefault(member.node, []).append((member, action))
        with self._nodes_lock:
            conns = {n: node.conn for n, node in self.nodes.items()}
        inflight = []
        records = []
        # one pipelined batch per node; nodes proceed in parallel
        for node_id, items in per_node.items():
            conn = conns.get(node_id)
            for member, action in items:
                if conn is None:
                    records.append(RuleRecord(node_id, member.stage_id, action, False, "node unreachable"))
                    continue
                try:
                    inflight.append((member, action, conn.request_async(Rule(member.stage_id, action))))
                except ConnectionError as exc:
                    records.append(RuleRecord(node_id, member.stage_id, action, False, str(exc)))
        timeout = max(policy.loop_interval, 1.0)
        for member, action, slot in inflight:
            try:
                ack = slot.wait(timeout)
                ok, detail = ack.status == proto.STATUS_OK, ack.detail
            except (TimeoutError, ConnectionError) as exc:
                ok, detail = False, str(exc)
            if isinstance(action, CreateChannel) and (ok or "already" in detail):
                member.installed = True
            records.append(RuleRecord(member.node, member.stage_id, action, ok, detail))
        return records

    def control_cycle(self) -> CycleReport:
        """Run collect, compute and enforce once; returns the cycle's report."""
        t0 = time.perf_counter_ns()
        self._drain_inbox()
        elapsed = time.monotonic() - self._started_at
        policy = self.policy.at(elapsed)
        unreachable = self._collect(policy)
        try:
            rates, pre_rates = self._compute(policy)
        except AllocationError as exc:
            log.error("allocation failed, keeping previous rates: %s", exc)
            rates, pre_rates = {j: rec.rate for j, rec in self.jobs.items()}, None
        rules = self._enforce(policy, rates)
        latency = time.perf_counter_ns() - t0
        report = CycleReport(
            index=self.cycles,
            timestamp=time.time(),
            elapsed=elapsed,
            algorithm=policy.algorithm,
            usages={j: rec.usage for j, rec in self.jobs.items()},
            rates=dict(rates),
            pre_rates=pre_rates,
            rules=tuple(rules),
            unreachable=tuple(unreachable),
            latency_ns=latency,
        )
        self.cycles += 1
        if self.keep_reports != 0:
            self.reports.append(report)
            if self.keep_reports is not None and len(self.reports) > self.keep_reports:
                del self.reports[0]
        if self._log is not None:
            for job_id in report.rates:
                self._log.writerow((f"{report.timestamp:.6f}", job_id, f"{report.usages[job_id]:.3f}",
                                    f"{report.rates[job_id]:.3f}", latency))
            self._log_file.flush()
        return report

    def _run(self) -> None:
        next_deadline = time.monotonic()
        while not self._stop.is_set():
            wait = next_deadline - time.monotonic()
            if wait > 0:
                # a registration wakes the loop for an immediate extra cycle
                self._wake.wait(wait)
            self._wake.clear()
            if self._stop.is_set():
                return
            try:
                self.control_cycle()
            except Exception:
                log.exception("control cycle failed")
            now = time.monotonic()
            interval = self.effective_policy().loop_interval
            while next_deadline <= now:
                next_deadline += interval

    def start(self) -> "GlobalController":
        self._started_at = time.monotonic()
        self._loop = threading.Thread(target=self._run, name="gc-loop", daemon=True)
        self._loop.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._wake.set()
        if self._loop is not None:
            self._loop.join(timeout=10)
        try:
            self._listener.close()
        except OSError:
            pass
        with self._nodes_lock:
            nodes = list(self.nodes.values())
        for node in nodes:
            node.conn.close()
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None
            self._log = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()
