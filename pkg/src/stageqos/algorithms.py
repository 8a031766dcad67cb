"""Allocation policies mapping job demands and usages to per-job rates.

All functions are pure and unit-agnostic: ``max_rate``, demands and usages
only need to share one unit (ops/s or bytes/s). Jobs are processed in order
of increasing demand, ties broken by job id, so results are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class AllocationError(ValueError):
    pass


@dataclass
class JobState:
    job_id: str
    demand: float
    usage: float = 0.0
    assigned_rate: float = 0.0

    def __post_init__(self):
        if not self.demand > 0:
            raise AllocationError(f"job {self.job_id}: demand must be > 0")
        if self.usage < 0 or math.isnan(self.usage):
            raise AllocationError(f"job {self.job_id}: usage must be >= 0")


@dataclass(frozen=True)
class ControlConfig:
    max_rate: float
    epsilon: float = 0.5
    loop_interval: float = 1.0

    def __post_init__(self):
        if not self.max_rate > 0:
            raise AllocationError("max_rate must be > 0")
        if not 0.0 <= self.epsilon <= 1.0:
            raise AllocationError("epsilon must be within [0, 1]")
        if not self.loop_interval > 0:
            raise AllocationError("loop_interval must be > 0")


@dataclass(frozen=True)
class PsfaBreakdown:
    """Intermediate values of one PSFA pass, in processing order."""

    order: tuple[str, ...]
    fair_shares: dict[str, float]
    pre_rates: dict[str, float]
    leftover: float
    rates: dict[str, float] = field(default_factory=dict)


def _ordered(jobs: Iterable[JobState]) -> list[JobState]:
    return sorted(jobs, key=lambda j: (j.demand, j.job_id))


def allocate_uniform(config: ControlConfig, jobs: Sequence[JobState], *,
                     per_job_rate: float | None = None, max_jobs: int | None = None) -> dict[str, float]:
    """Every job gets the same static rate, whatever its usage.

    The rate defaults to ``max_rate / max_jobs``; capacity left by absent
    jobs is not handed to the others.
    """
    if per_job_rate is None:
        if not max_jobs:
            max_jobs = max(1, len(jobs))
        per_job_rate = config.max_rate / max_jobs
    if per_job_rate < 0:
        raise AllocationError("per-job rate must be >= 0")
    return {job.job_id: float(per_job_rate) for job in jobs}


def check_priority_limits(config: ControlConfig, limits: Iterable[float]) -> None:
    total = math.fsum(limits)
    if total > config.max_rate * (1 + 1e-12):
        raise AllocationError(f"priority limits sum to {total}, above max rate {config.max_rate}")


def allocate_priority(config: ControlConfig, jobs: Sequence[JobState]) -> dict[str, float]:
    """Each job gets exactly its configured limit (``JobState.demand``)."""
    check_priority_limits(config, (job.demand for job in jobs))
    return {job.job_id: float(job.demand) for job in jobs}


def allocate_psharing(config: ControlConfig, jobs: Sequence[JobState]) -> dict[str, float]:
    """Max-min fair shares over demands, leftover split proportionally to demand.

    Water-filling in increasing-demand order: a job whose demand fits under an
    equal split of what is left is fully served; once one does not fit,
    neither does any later (larger) demand, so all remaining jobs get the
    same equal split. If every demand is met, the spare capacity is shared in
    proportion to demand, i.e. job *i* ends up with
    ``demand_i * max_rate / sum(demands)``.
    """
    if not jobs:
        return {}
    ordered = _ordered(jobs)
    rates: dict[str, float] = {}
    left = config.max_rate
    for i, job in enumerate(ordered):
        share = left / (len(ordered) - i)
        if job.demand > share:
            for rest in ordered[i:]:
                rates[rest.job_id] = share
            return rates
        rates[job.job_id] = float(job.demand)
        left -= job.demand
    total_demand = math.fsum(job.demand for job in ordered)
    if left > 0:
        for job in ordered:
            rates[job.job_id] = job.demand * config.max_rate / total_demand
    return rates


def psfa_breakdown(config: ControlConfig, jobs: Sequence[JobState]) -> PsfaBreakdown:
    """Run one pass of proportional sharing without false allocation.

    Each job, in increasing-demand order, is capped at its fair share of what
    is left. A job using no more than its demand gets its usage plus an
    ``epsilon`` fraction of the gap to its demand; a job above its demand
    gets its demand. Whatever remains is then split in proportion to usage,
    or equally when every job is idle.
    """
    ordered = _ordered(jobs)
    active = len(ordered)
    left = config.max_rate
    eps = config.epsilon
    fair: dict[str, float] = {}
    pre: dict[str, float] = {}
    for i, job in enumerate(ordered):
        fair_share = left / (active - i)
        if job.usage <= job.demand:
            threshold = (job.demand - job.usage) * eps
            rate = min(job.usage + threshold, fair_share)
        else:
            rate = min(job.demand, fair_share)
        fair[job.job_id] = fair_share
        pre[job.job_id] = rate
        left -= rate
    left = max(left, 0.0)

    total_usage = math.fsum(job.usage for job in ordered)
    rates: dict[str, float] = {}
    for job in ordered:
        if total_usage > 0:
            rates[job.job_id] = pre[job.job_id] + job.usage / total_usage * left
        else:
            rates[job.job_id] = pre[job.job_id] + left / active
    return PsfaBreakdown(tuple(j.job_id for j in ordered), fair, pre, left, rates)


def allocate_psfa(config: ControlConfig, jobs: Sequence[JobState]) -> dict[str, float]:
    if not jobs:
        return {}
    return psfa_breakdown(config, jobs).rates


ALGORITHMS = {
    "uniform": allocate_uniform,
    "priority": allocate_priority,
    "psharing": allocate_psharing,
    "psfa": allocate_psfa,
}
