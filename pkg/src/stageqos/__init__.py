"""Per-job storage QoS.

Stages rate-limit the requests of one application instance with per-channel
token buckets; local controllers proxy between the stages of a node and a
global controller that runs the allocation policy.
"""

from .algorithms import (
    ControlConfig,
    JobState,
    allocate_priority,
    allocate_psfa,
    allocate_psharing,
    allocate_uniform,
    psfa_breakdown,
)
from .bucket import TokenBucket
from .controller import GlobalController, Policy, split_job_rate
from .local import LocalController, StageConfig, StageLink
from .requests import Granularity, OpClass, OpType, Request, classify, op_class_of
from .stage import CreateChannel, SetChannelRate, Stage, StageInfo

__version__ = "0.1.0"

__all__ = [
    "ControlConfig",
    "CreateChannel",
    "GlobalController",
    "Granularity",
    "JobState",
    "LocalController",
    "OpClass",
    "OpType",
    "Policy",
    "Request",
    "SetChannelRate",
    "Stage",
    "StageConfig",
    "StageInfo",
    "StageLink",
    "TokenBucket",
    "allocate_priority",
    "allocate_psfa",
    "allocate_psharing",
    "allocate_uniform",
    "classify",
    "op_class_of",
    "psfa_breakdown",
    "split_job_rate",
]
