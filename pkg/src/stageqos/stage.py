"""Data-plane stage.

A stage sits between one application instance and the file system. Each
request goes through the same steps:

1. mountpoint check (path-based) or FD lookup (descriptor-based); requests
   outside the managed namespace go straight to the sink;
2. classification against the installed channel matchers; unmatched requests
   also go straight to the sink;
3. FIFO queueing in the matching channel until its token bucket grants;
4. forwarding to the sink. Opens on managed paths record the returned
   descriptor, closes drop it.

Channels and their rates are installed by the control plane through
:meth:`Stage.apply_housekeeping_rule`; statistics are pulled with
:meth:`Stage.collect_stats` (delta semantics).
"""

from __future__ import annotations

import collections
import logging
import operator
import threading
import time
from dataclasses import dataclass
from typing import Callable, Union

from .bucket import DEFAULT_BURST_SECONDS, BLOCKED, NS_PER_S, TokenBucket
from .requests import (
    OpClass,
    OpType,
    Granularity,
    Request,
    normalize_path,
    token_for,
    _token,
)

log = logging.getLogger(__name__)

_monotonic_ns = time.monotonic_ns
_MISS = object()

# dispatcher threads never sleep less than this when tokens are short
MIN_DISPATCH_WAIT = 0.002

_ATTRIBUTE = {
    Granularity.OP_TYPE: operator.attrgetter("op_type._value_"),
    Granularity.OP_CLASS: operator.attrgetter("op_class._value_"),
    Granularity.JOB: operator.attrgetter("job_id"),
    Granularity.USER: operator.attrgetter("user_id"),
}


class StageError(Exception):
    pass


class RuleError(StageError):
    pass


class UnknownChannel(RuleError):
    pass


class DuplicateChannel(RuleError):
    pass


class StageClosed(StageError):
    pass


@dataclass(frozen=True)
class StageInfo:
    stage_id: str
    job_id: str
    pid: int
    hostname: str
    user_id: str = ""

    def validate(self) -> None:
        if not self.job_id:
            raise ValueError("stage info needs a non-empty job_id")


@dataclass(frozen=True)
class CreateChannel:
    channel_id: int
    granularity: Granularity
    value: str
    rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        if self.rate < 0:
            raise ValueError("rate must be >= 0")


@dataclass(frozen=True)
class SetChannelRate:
    channel_id: int
    rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("rate must be >= 0")


HousekeepingRule = Union[CreateChannel, SetChannelRate]


@dataclass(frozen=True)
class ChannelStats:
    channel_id: int
    ops: int
    bytes: int
    window_ns: int

    @property
    def ops_per_s(self) -> float:
        return self.ops * NS_PER_S / self.window_ns if self.window_ns > 0 else 0.0

    @property
    def bytes_per_s(self) -> float:
        return self.bytes * NS_PER_S / self.window_ns if self.window_ns > 0 else 0.0


@dataclass(frozen=True)
class StageStats:
    stage_id: str
    job_id: str
    channels: tuple[ChannelStats, ...]


class CompletionRecord(tuple):
    """Outcome of one submitted request.

    ``channel_id`` is None for bypassed requests, whose ``enqueued_at`` and
    ``granted_at`` are identical. A sink failure is carried in ``error``.
    Records are plain tuples underneath so the data path can build them
    without a Python-level constructor.
    """

    __slots__ = ()

    request = property(operator.itemgetter(0))
    channel_id = property(operator.itemgetter(1))
    enqueued_at = property(operator.itemgetter(2))
    granted_at = property(operator.itemgetter(3))
    result = property(operator.itemgetter(4))
    error = property(operator.itemgetter(5))

    def __new__(cls, request, channel_id, enqueued_at, granted_at, result, error):
        return tuple.__new__(cls, (request, channel_id, enqueued_at, granted_at, result, error))

    @property
    def bypassed(self) -> bool:
        return self[1] is None

    def __repr__(self):
        return (f"CompletionRecord({self.request.op_type.value}, channel={self.channel_id}, "
                f"wait_ns={self.granted_at - self.enqueued_at}, error={self.error!r})")


_new_tuple = tuple.__new__


class MountpointRegistry:
    """Ordered set of managed path prefixes, matched per path component."""

    def __init__(self, paths=()):
        self._paths: list[str] = []
        self._exact: frozenset[str] = frozenset()
        self._prefixes: tuple[str, ...] = ()
        for path in paths:
            self.register(path)

    def register(self, path: str) -> None:
        norm = normalize_path(path)
        if norm in self._paths:
            return
        self._paths.append(norm)
        self._exact = frozenset(self._paths)
        self._prefixes = tuple("/" if p == "/" else p + "/" for p in self._paths)

    def is_managed(self, path: str) -> bool:
        if "/." in path or "//" in path or (path.endswith("/") and len(path) > 1):
            try:
                path = normalize_path(path)
            except ValueError:
                return False
        return path in self._exact or path.startswith(self._prefixes)

    def __iter__(self):
        return iter(self._paths)

    def __len__(self):
        return len(self._paths)


class FdMapping:
    """Open descriptors seen by the stage, each flagged managed or not.

    Single dict operations are atomic under the GIL, which is all the
    synchronization the table needs.
    """

    def __init__(self):
        self.table: dict[int, tuple[str, bool]] = {}

    def add(self, fd: int, path: str, managed: bool) -> None:
        self.table[fd] = (path, managed)

    def remove(self, fd: int):
        return self.table.pop(fd, None)

    def is_managed(self, fd: int) -> bool:
        entry = self.table.get(fd)
        return entry is not None and entry[1]

    def __contains__(self, fd):
        return fd in self.table

    def __len__(self):
        return len(self.table)


class _Pending:
    __slots__ = ("request", "cost", "remaining", "size", "enqueued_at", "granted_at",
                 "callback", "event", "record")

    def __init__(self, request, cost, size, enqueued_at, callback, event):
        self.request = request
        self.cost = cost
        self.remaining = cost
        self.size = size
        self.enqueued_at = enqueued_at
        self.granted_at = 0
        self.callback = callback
        self.event = event
        self.record = None


class Channel:
    """A FIFO queue paced by one token bucket.

    Requests that find the queue empty and enough tokens are granted inline
    by the submitting thread. Everything else waits in the queue for the
    channel's dispatcher thread, which grants in FIFO order and splits data
    requests larger than the bucket into capacity-sized draws.
    """

    def __init__(self, stage: "Stage", channel_id: int, granularity: Granularity, value: str,
                 rate: float, burst_seconds: float = DEFAULT_BURST_SECONDS):
        self.stage = stage
        self.channel_id = channel_id
        self.granularity = Granularity(granularity)
        self.value = value
        self.matcher = token_for(self.granularity, value)
        self.bucket = TokenBucket(rate, burst_seconds=burst_seconds)
        self.lock = self.bucket.lock
        self.cond = self.bucket.cond
        self.queue: collections.deque[_Pending] = collections.deque()
        self.ops = 0
        self.bytes = 0
        self.window_start = _monotonic_ns()
        self.closed = False
        self._thread = threading.Thread(
            target=self._dispatch_loop, name=f"channel-{channel_id}", daemon=True)
        self._thread.start()

    def __repr__(self):
        return (f"Channel({self.channel_id}, {self.granularity.value}={self.value!r}, "
                f"rate={self.bucket.rate}, queued={len(self.queue)})")

    @property
    def rate(self) -> float:
        return self.bucket.rate

    def set_rate(self, rate: float) -> None:
        self.bucket.set_rate(rate)

    def take_stats(self) -> ChannelStats:
        with self.lock:
            now = _monotonic_ns()
            stats = ChannelStats(self.channel_id, self.ops, self.bytes, now - self.window_start)
            self.ops = 0
            self.bytes = 0
            self.window_start = now
        return stats

    def close(self) -> list[_Pending]:
        with self.cond:
            self.closed = True
            left = list(self.queue)
            self.queue.clear()
            self.cond.notify_all()
        return left

    def _dispatch_loop(self) -> None:
        cond = self.cond
        queue = self.queue
        bucket = self.bucket
        finish = self.stage._finish
        while True:
            batch = []
            with cond:
                while not queue and not self.closed:
                    cond.wait()
                if self.closed:
                    return
                wait = 0.0
                while queue:
                    item = queue[0]
                    draw = item.remaining if item.remaining <= bucket.capacity else bucket.capacity
                    now = _monotonic_ns()
                    wait = bucket._take(draw, now)
                    if wait:
                        break
                    item.remaining -= draw
                    if item.remaining <= 0:
                        queue.popleft()
                        self.ops += 1
                        self.bytes += item.size
                        item.granted_at = now
                        batch.append(item)
                if not batch:
                    if wait == BLOCKED:
                        cond.wait()
                    else:
                        # batch grants instead of waking once per token
                        floor = min(MIN_DISPATCH_WAIT, 0.5 * bucket.capacity / bucket.rate)
                        cond.wait(wait if wait > floor else floor)
                    continue
            for item in batch:
                finish(item, self.channel_id)


_PATH_CACHE_LIMIT = 4096


class Stage:
    """One data-plane stage.

    ``submit`` blocks until the request has been forwarded to the sink;
    ``submit_nowait`` returns immediately and reports completion through a
    callback, which is what lets a replayer keep offering load while a
    channel builds a backlog.
    """

    def __init__(self, info: StageInfo, sink, mountpoints=(), *,
                 burst_seconds: float = DEFAULT_BURST_SECONDS):
        info.validate()
        self.info = info
        self.sink = sink
        self.registry = MountpointRegistry(mountpoints)
        self.fds = FdMapping()
        self.burst_seconds = burst_seconds
        self.channels: dict[int, Channel] = {}
        self.bypassed = 0
        self.closed = False
        self._by_token: dict[int, Channel] = {}
        self._matchers: list[tuple[Callable, dict, Granularity]] = []
        # the lone matcher when every channel shares one granularity (the usual case)
        self._single: tuple[Callable, dict, Granularity] | None = None
        self._fd_table = self.fds.table
        self._path_cache: dict[str, bool] = {}
        self._lock = threading.Lock()
        self._ready = threading.Event()

    def __repr__(self):
        return f"Stage({self.info.stage_id!r}, job={self.info.job_id!r}, channels={list(self.channels)})"

    @property
    def stage_id(self) -> str:
        return self.info.stage_id

    # -- control surface -------------------------------------------------

    def register_mountpoint(self, path: str) -> None:
        self.registry.register(path)
        self._path_cache = {}

    def create_channel(self, channel_id: int, granularity, value: str, rate: float = 0.0,
                       burst_seconds: float | None = None) -> Channel:
        granularity = Granularity(granularity)
        if granularity is Granularity.OP_TYPE:
            value = OpType(value).value
        elif granularity is Granularity.OP_CLASS:
            value = OpClass(value).value
        with self._lock:
            if channel_id in self.channels:
                raise DuplicateChannel(f"channel {channel_id} already exists")
            matcher = token_for(granularity, value)
            if matcher in self._by_token:
                raise DuplicateChannel(
                    f"channel {self._by_token[matcher].channel_id} already matches "
                    f"{granularity.value}={value!r}")
            channel = Channel(self, channel_id, granularity, value, rate,
                              self.burst_seconds if burst_seconds is None else burst_seconds)
            self.channels[channel_id] = channel
            self._by_token[matcher] = channel
            grans = []
            for ch in self.channels.values():
                if ch.granularity not in grans:
                    grans.append(ch.granularity)
            # fresh caches: the new channel may capture values seen as unmatched
            self._matchers = [(_ATTRIBUTE[g], {}, g) for g in grans]
            self._single = self._matchers[0] if len(self._matchers) == 1 else None
        self._ready.set()
        return channel

    def set_channel_rate(self, channel_id: int, rate: float) -> None:
        channel = self.channels.get(channel_id)
        if channel is None:
            raise UnknownChannel(f"unknown channel {channel_id}")
        channel.set_rate(rate)

    def apply_housekeeping_rule(self, rule: HousekeepingRule) -> None:
        if isinstance(rule, CreateChannel):
            self.create_channel(rule.channel_id, rule.granularity, rule.value, rule.rate)
        elif isinstance(rule, SetChannelRate):
            self.set_channel_rate(rule.channel_id, rule.rate)
        else:
            raise RuleError(f"unsupported rule {rule!r}")

    def collect_stats(self) -> StageStats:
        channels = tuple(ch.take_stats() for ch in list(self.channels.values()))
        return StageStats(self.info.stage_id, self.info.job_id, channels)

    def wait_ready(self, timeout: float | None = None) -> bool:
        """Wait until the control plane has installed at least one channel."""
        return self._ready.wait(timeout)

    def close(self) -> None:
        self.closed = True
        for channel in list(self.channels.values()):
            for item in channel.close():
                self._fail(item, channel.channel_id, StageClosed("stage closed"))

    # -- data path -------------------------------------------------------

    def _path_managed(self, path: str) -> bool:
        managed = self.registry.is_managed(path)
        cache = self._path_cache
        if len(cache) >= _PATH_CACHE_LIMIT:
            cache.clear()
        cache[path] = managed
        return managed

    def route(self, request: Request) -> Channel | None:
        """Channel that will pace ``request``, or None when it bypasses."""
        target = request.target
        if target.__class__ is int:
            entry = self.fds.table.get(target)
            if entry is None or not entry[1]:
                return None
        else:
            managed = self._path_cache.get(target)
            if managed is None:
                managed = self._path_managed(target)
            if not managed:
                return None
        for getter, cache, granularity in self._matchers:
            value = getter(request)
            channel = cache.get(value, _MISS)
            if channel is _MISS:
                channel = self._by_token.get(_token(granularity, value))
                cache[value] = channel
            if channel is not None:
                return channel
        return None

    def submit(self, request: Request) -> CompletionRecord:
        if self.closed:
            raise StageClosed("stage closed")
        # route() inlined: this is the hot path of every managed request
        channel = None
        target = request.target
        if target.__class__ is int:
            entry = self._fd_table.get(target)
            managed = entry is not None and entry[1]
        else:
            managed = self._path_cache.get(target)
            if managed is None:
                managed = self._path_managed(target)
        if managed:
            single = self._single
            if single is not None:
                getter, cache, granularity = single
                value = getter(request)
                channel = cache.get(value, _MISS)
                if channel is _MISS:
                    channel = self._by_token.get(_token(granularity, value))
                    cache[value] = channel
            else:
                channel = self.route(request)
        if channel is None:
            self.bypassed += 1
            now = _monotonic_ns()
            return self._forward(request, None, now, now)
        size = request.size
        cost = size if size > 0 else 1
        with channel.lock:
            bucket = channel.bucket
            now = _monotonic_ns()
            if not channel.queue and cost <= bucket.capacity:
                # same arithmetic as TokenBucket._take
                tokens = bucket.tokens + bucket.rate * (now - bucket.last_refill) / NS_PER_S
                if tokens > bucket.capacity:
                    tokens = bucket.capacity
                bucket.last_refill = now
                if tokens >= cost:
                    bucket.tokens = tokens - cost
                    channel.ops += 1
                    channel.bytes += size
                    pending = None
                else:
                    bucket.tokens = tokens
                    pending = self._enqueue(channel, request, cost, size, now, None)
            else:
                pending = self._enqueue(channel, request, cost, size, now, None)
        if pending is not None:
            pending.event.wait()
            return pending.record
        try:
            result = self.sink.apply(request)
            error = None
        except Exception as exc:
            result = None
            error = exc
        op = request.op_type
        if op is _OPEN:
            if result.__class__ is int:
                self._fd_table[result] = (target, True)
        elif op is _CLOSE and target.__class__ is int:
            self._fd_table.pop(target, None)
        return _new_tuple(CompletionRecord, (request, channel.channel_id, now, now, result, error))

    def submit_nowait(self, request: Request, callback: Callable[[CompletionRecord], None]) -> None:
        """Submit without waiting; ``callback`` runs once the request completes.

        The callback may run inline (bypass or immediate grant) or on the
        channel's dispatcher thread.
        """
        if self.closed:
            raise StageClosed("stage closed")
        channel = self.route(request)
        if channel is None:
            self.bypassed += 1
            now = _monotonic_ns()
            callback(self._forward(request, None, now, now))
            return
        size = request.size
        cost = size if size > 0 else 1
        with channel.lock:
            bucket = channel.bucket
            now = _monotonic_ns()
            granted = False
            if not channel.queue and cost <= bucket.capacity:
                tokens = bucket.tokens + bucket.rate * (now - bucket.last_refill) / NS_PER_S
                if tokens > bucket.capacity:
                    tokens = bucket.capacity
                bucket.last_refill = now
                if tokens >= cost:
                    bucket.tokens = tokens - cost
                    channel.ops += 1
                    channel.bytes += size
                    granted = True
                else:
                    bucket.tokens = tokens
            if not granted:
                self._enqueue(channel, request, cost, size, now, callback)
        if granted:
            callback(self._forward(request, channel.channel_id, now, now))

    @staticmethod
    def _enqueue(channel: Channel, request, cost, size, now, callback) -> _Pending:
        # caller holds channel.lock
        if channel.closed:
            raise StageClosed("stage closed")
        pending = _Pending(request, cost, size, now, callback,
                           threading.Event() if callback is None else None)
        channel.queue.append(pending)
        if len(channel.queue) == 1:
            channel.cond.notify()
        return pending

    def _forward(self, request: Request, channel_id, enqueued_at: int, granted_at: int) -> CompletionRecord:
        try:
            result = self.sink.apply(request)
            error = None
        except Exception as exc:  # sink failures travel in the record
            result = None
            error = exc
        op = request.op_type
        if op is _OPEN:
            if result.__class__ is int:
                target = request.target
                managed = channel_id is not None or (
                    target.__class__ is str and self.registry.is_managed(target))
                self.fds.table[result] = (target, managed)
        elif op is _CLOSE and request.target.__class__ is int:
            self.fds.table.pop(request.target, None)
        return _new_tuple(CompletionRecord, (request, channel_id, enqueued_at, granted_at, result, error))

    def _finish(self, item: _Pending, channel_id: int) -> None:
        record = self._forward(item.request, channel_id, item.enqueued_at, item.granted_at)
        self._complete(item, record)

    def _fail(self, item: _Pending, channel_id: int, error: Exception) -> None:
        now = _monotonic_ns()
        record = CompletionRecord(item.request, channel_id, item.enqueued_at, now, None, error)
        self._complete(item, record)

    @staticmethod
    def _complete(item: _Pending, record: CompletionRecord) -> None:
        item.record = record
        if item.callback is not None:
            try:
                item.callback(record)
            except Exception:
                log.exception("completion callback failed")
        else:
            item.event.set()


_OPEN = OpType.OPEN
_CLOSE = OpType.CLOSE
