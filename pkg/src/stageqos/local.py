"""Per-node local controller and the stage-side link to it.

The local controller is a proxy. Stages register with it, either over a
socket (:class:`StageLink`) or in-process (:meth:`LocalController.attach_stage`),
and it forwards each registration to the global controller. When the global
controller collects, it polls every stage in parallel, bounded by a stats
timeout, and returns the per-stage channel counters unchanged. Rules coming
down are forwarded verbatim to the stage they name.
"""

from __future__ import annotations

import configparser
import itertools
import logging
import os
import socket
import threading
import time
from dataclasses import dataclass, field, fields
from typing import Union

from . import protocol as proto
from .protocol import (
    CollectReq,
    CollectResp,
    Connection,
    RegisterAck,
    RegisterStage,
    Rule,
    RuleAck,
    StatsEntry,
)
from .bucket import DEFAULT_BURST_SECONDS
from .sinks import make_sink
from .stage import (
    ChannelStats,
    Stage,
    StageInfo,
    StageStats,
)

log = logging.getLogger(__name__)

DEFAULT_LOOP_INTERVAL = 1.0


class RegistrationError(Exception):
    pass


@dataclass
class StageSession:
    """The local controller's view of one registered stage."""

    stage_id: str
    info: StageInfo
    handle: Union[Connection, Stage]
    last_stats: StageStats | None = None
    alive: bool = True

    @property
    def in_process(self) -> bool:
        return isinstance(self.handle, Stage)


@dataclass(frozen=True)
class NodeStats:
    """Per-job summed rates (ops/s and bytes/s) over one node's stages."""

    ops_per_s: dict[str, float] = field(default_factory=dict)
    bytes_per_s: dict[str, float] = field(default_factory=dict)
    stale: tuple[str, ...] = ()
    gone: tuple[str, ...] = ()


def node_stats(entries) -> NodeStats:
    """Fold per-stage stats entries into per-job sums."""
    ops: dict[str, float] = {}
    nbytes: dict[str, float] = {}
    stale, gone = [], []
    for e in entries:
        if e.gone:
            gone.append(e.stage_id)
            continue
        if e.stale:
            stale.append(e.stage_id)
        window = e.window_ns / 1e9
        ops.setdefault(e.job_id, 0.0)
        nbytes.setdefault(e.job_id, 0.0)
        if window > 0:
            ops[e.job_id] += e.ops / window
            nbytes[e.job_id] += e.bytes / window
    return NodeStats(ops, nbytes, tuple(stale), tuple(gone))


def _entries_for(stats: StageStats, flags: int = 0) -> list[StatsEntry]:
    if not stats.channels:
        # a stage without channels still shows up so the job stays known
        return [StatsEntry(stats.stage_id, stats.job_id, 0, 0, 0, 0, flags)]
    return [StatsEntry(stats.stage_id, stats.job_id, c.channel_id, c.ops, c.bytes, c.window_ns, flags)
            for c in stats.channels]


def _stage_stats_from(resp: CollectResp, session: StageSession) -> StageStats:
    channels = tuple(ChannelStats(e.channel_id, e.ops, e.bytes, e.window_ns)
                     for e in resp.entries if e.channel_id != 0)
    return StageStats(session.stage_id, session.info.job_id, channels)


class LocalController:
    """Proxy between the stages of one node and the global controller.

    Args:
        node_id: Name used when assigning stage ids.
        listen_address: Where stages connect (``host:port`` or ``unix:/path``);
            None disables the socket listener, leaving in-process stages only.
        upstream: Global controller address; None runs detached, which is
            handy for tests that drive the controller directly.
        loop_interval: Control period, used to derive the stats timeout.
        stats_timeout: Per-collect deadline for stage answers; defaults to a
            quarter of ``loop_interval``.
    """

    def __init__(self, node_id: str = "node0", listen_address: str | None = "127.0.0.1:0",
                 upstream: str | None = None, *, loop_interval: float = DEFAULT_LOOP_INTERVAL,
                 stats_timeout: float | None = None):
        self.node_id = node_id
        self.stats_timeout = loop_interval / 4 if stats_timeout is None else stats_timeout
        self.sessions: dict[str, StageSession] = {}
        self._by_job_pid: dict[tuple[str, int], str] = {}
        self._departed: list[StageSession] = []
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._listener: socket.socket | None = None
        self._acceptor: threading.Thread | None = None
        self.address: str | None = None
        self.upstream: Connection | None = None
        self.closed = False
        if listen_address is not None:
            self._listener = proto.listen(listen_address)
            self.address = proto.bound_address(self._listener)
            self._acceptor = threading.Thread(target=self._accept_loop,
                                              name=f"{node_id}-accept", daemon=True)
            self._acceptor.start()
        if upstream is not None:
            self.connect_upstream(upstream)

    def __repr__(self):
        return f"LocalController({self.node_id!r}, stages={len(self.sessions)})"

    # -- wiring ------------------------------------------------------------

    def connect_upstream(self, address: str, timeout: float = 5.0) -> None:
        sock = proto.connect(address, timeout)
        self.upstream = Connection(sock, self.handle_upstream, name=f"{self.node_id}-up").start()

    def _accept_loop(self) -> None:
        while not self.closed:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            conn_box: list[Connection] = []
            conn = Connection(sock, lambda msg, box=conn_box: self._handle_stage(msg, box[0]),
                              on_close=self._on_stage_disconnect, name=f"{self.node_id}-stage")
            conn_box.append(conn)
            conn.start()

    def close(self) -> None:
        self.closed = True
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._lock:
            sessions = list(self.sessions.values())
        for s in sessions:
            if not s.in_process:
                s.handle.close()
        if self.upstream is not None:
            self.upstream.close()

    # -- registration --------------------------------------------------------

    def register_stage(self, info: StageInfo, handle: Union[Connection, Stage]) -> str:
        """Create a session for ``info`` and announce it upstream.

        Returns the stage id, assigned here when ``info.stage_id`` is empty.
        Raises RegistrationError on an empty job id, a duplicate
        (job_id, pid) pair, or an upstream rejection.
        """
        try:
            info.validate()
        except ValueError as exc:
            raise RegistrationError(str(exc)) from None
        with self._lock:
            key = (info.job_id, info.pid)
            if key in self._by_job_pid:
                raise RegistrationError(
                    f"job {info.job_id!r} pid {info.pid} already registered as "
                    f"{self._by_job_pid[key]}")
            stage_id = info.stage_id or f"{self.node_id}/s{next(self._ids)}"
            if stage_id in self.sessions:
                raise RegistrationError(f"stage id {stage_id!r} already in use")
            info = StageInfo(stage_id, info.job_id, info.pid, info.hostname, info.user_id)
            session = StageSession(stage_id, info, handle)
            self.sessions[stage_id] = session
            self._by_job_pid[key] = stage_id
        if isinstance(handle, Stage) and handle.info.stage_id != stage_id:
            handle.info = info
        if self.upstream is not None:
            try:
                ack = self.upstream.request(RegisterStage(info), timeout=5.0)
            except (ConnectionError, TimeoutError) as exc:
                self._drop(session)
                raise RegistrationError(f"upstream registration failed: {exc}") from None
            if ack.status != proto.STATUS_OK:
                self._drop(session)
                raise RegistrationError(f"rejected upstream: {ack.detail}")
        log.info("%s: registered %s for job %s", self.node_id, stage_id, info.job_id)
        return stage_id

    def attach_stage(self, stage: Stage) -> str:
        """Register an in-process stage; rules and polls become direct calls."""
        return self.register_stage(stage.info, stage)

    def detach_stage(self, stage_id: str) -> None:
        """Mark a stage as gone; the next report tells the global controller."""
        with self._lock:
            session = self.sessions.get(stage_id)
        if session is not None:
            self._drop(session, departed=True)

    def _drop(self, session: StageSession, departed: bool = False) -> None:
        with self._lock:
            if self.sessions.get(session.stage_id) is not session:
                return
            del self.sessions[session.stage_id]
            self._by_job_pid.pop((session.info.job_id, session.info.pid), None)
            session.alive = False
            if departed:
                self._departed.append(session)

    def _on_stage_disconnect(self, conn: Connection) -> None:
        with self._lock:
            owned = [s for s in self.sessions.values() if s.handle is conn]
        for session in owned:
            log.info("%s: stage %s disconnected", self.node_id, session.stage_id)
            self._drop(session, departed=True)

    def _handle_stage(self, msg, conn: Connection):
        if isinstance(msg, RegisterStage):
            try:
                stage_id = self.register_stage(msg.info, conn)
            except RegistrationError as exc:
                return RegisterAck(proto.STATUS_ERROR, "", str(exc))
            return RegisterAck(proto.STATUS_OK, stage_id, "")
        raise proto.ProtocolError(f"stages may not send {type(msg).__name__}")

    # -- collect -------------------------------------------------------------

    def collect_entries(self) -> list[StatsEntry]:
        """Poll every live stage once; stale and departed stages are flagged."""
        with self._lock:
            sessions = list(self.sessions.values())
            departed, self._departed = self._departed, []
        deadline = time.monotonic() + self.stats_timeout
        waiting = []
        entries: list[StatsEntry] = []
        for s in sessions:
            if s.in_process:
                continue
            try:
                waiting.append((s, s.handle.request_async(CollectReq())))
            except ConnectionError:
                self._drop(s, departed=True)
                departed.append(s)
        for s in sessions:
            if s.in_process:
                s.last_stats = s.handle.collect_stats()
                entries.extend(_entries_for(s.last_stats))
        for s, slot in waiting:
            try:
                resp = slot.wait(max(0.0, deadline - time.monotonic()))
            except TimeoutError:
                entries.extend(self._stale_entries(s))
                continue
            except ConnectionError:
                self._drop(s, departed=True)
                departed.append(s)
                continue
            s.last_stats = _stage_stats_from(resp, s)
            entries.extend(_entries_for(s.last_stats))
        for s in departed:
            entries.append(StatsEntry(s.stage_id, s.info.job_id, 0, 0, 0, 0, proto.FLAG_GONE))
        return entries

    @staticmethod
    def _stale_entries(session: StageSession) -> list[StatsEntry]:
        # last window zeroed; channel ids kept so the controller can still address them
        channels = session.last_stats.channels if session.last_stats else ()
        if not channels:
            return [StatsEntry(session.stage_id, session.info.job_id, 0, 0, 0, 0, proto.FLAG_STALE)]
        return [StatsEntry(session.stage_id, session.info.job_id, c.channel_id, 0, 0, 0, proto.FLAG_STALE)
                for c in channels]

    def aggregate_and_report(self) -> NodeStats:
        """Collect once and fold the result into per-job sums."""
        return node_stats(self.collect_entries())

    # -- enforce -------------------------------------------------------------

    def apply_rule(self, rule: Rule) -> RuleAck:
        with self._lock:
            session = self.sessions.get(rule.stage_id)
        if session is None:
            return RuleAck(proto.STATUS_ERROR, f"unknown stage {rule.stage_id!r}")
        if session.in_process:
            try:
                session.handle.apply_housekeeping_rule(rule.action)
            except Exception as exc:
                return RuleAck(proto.STATUS_ERROR, str(exc))
            return RuleAck(proto.STATUS_OK, "")
        try:
            ack = session.handle.request(Rule(rule.stage_id, rule.action), timeout=self.stats_timeout * 4)
        except (ConnectionError, TimeoutError) as exc:
            return RuleAck(proto.STATUS_ERROR, f"stage {rule.stage_id}: {exc}")
        return RuleAck(ack.status, ack.detail)

    def apply_rules(self, rules) -> list[RuleAck]:
        return [self.apply_rule(r) for r in rules]

    def handle_upstream(self, msg):
        if isinstance(msg, CollectReq):
            return CollectResp(tuple(self.collect_entries()))
        if isinstance(msg, Rule):
            return self.apply_rule(msg)
        raise proto.ProtocolError(f"local controller cannot serve {type(msg).__name__}")


class StageLink:
    """Connects a :class:`Stage` to its local controller over a socket.

    Registration happens in the constructor; afterwards the link serves the
    controller's collect and rule requests from its reader thread.
    """

    def __init__(self, stage: Stage, address: str, timeout: float = 5.0):
        self.stage = stage
        sock = proto.connect(address, timeout)
        self.conn = Connection(sock, self._handle, name=f"link-{stage.info.job_id}").start()
        ack = self.conn.request(RegisterStage(stage.info), timeout=timeout)
        if ack.status != proto.STATUS_OK:
            self.conn.close()
            raise RegistrationError(ack.detail)
        self.stage_id = ack.stage_id
        if stage.info.stage_id != ack.stage_id:
            stage.info = StageInfo(ack.stage_id, stage.info.job_id, stage.info.pid,
                                   stage.info.hostname, stage.info.user_id)

    def _handle(self, msg):
        if isinstance(msg, CollectReq):
            stats = self.stage.collect_stats()
            return CollectResp(tuple(_entries_for(stats)))
        if isinstance(msg, Rule):
            try:
                self.stage.apply_housekeeping_rule(msg.action)
            except Exception as exc:
                return RuleAck(proto.STATUS_ERROR, str(exc))
            return RuleAck(proto.STATUS_OK, "")
        raise proto.ProtocolError(f"stage cannot serve {type(msg).__name__}")

    def close(self) -> None:
        self.conn.close()


def default_stage_info(job_id: str, user_id: str = "", stage_id: str = "") -> StageInfo:
    return StageInfo(stage_id, job_id, os.getpid(), socket.gethostname(), user_id)



@dataclass
class StageConfig:
    """Everything a stage process needs to come up and join its node.

    The file form is ``key = value`` lines; ``mountpoints`` is comma-separated::

        job_id = job1
        user_id = alice
        mountpoints = /scratch, /projects
        sink = directory
        sink_root = /tmp/sandbox
        controller = 127.0.0.1:7100
    """

    job_id: str
    mountpoints: tuple[str, ...] = ("/scratch",)
    user_id: str = ""
    stage_id: str = ""
    sink: str = "null"
    sink_root: str | None = None
    controller: str | None = None
    burst_seconds: float = DEFAULT_BURST_SECONDS

    @classmethod
    def from_text(cls, text: str) -> "StageConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string("[stage]\n" + text)
        raw = dict(parser["stage"])
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown stage config keys {sorted(unknown)}")
        if "job_id" not in raw:
            raise ValueError("stage config needs job_id")
        if "mountpoints" in raw:
            raw["mountpoints"] = tuple(p.strip() for p in raw["mountpoints"].split(",") if p.strip())
        if "burst_seconds" in raw:
            raw["burst_seconds"] = float(raw["burst_seconds"])
        return cls(**raw)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "StageConfig":
        with open(path) as f:
            return cls.from_text(f.read())

    def build_stage(self) -> Stage:
        info = default_stage_info(self.job_id, self.user_id, self.stage_id)
        return Stage(info, make_sink(self.sink, self.sink_root), self.mountpoints,
                     burst_seconds=self.burst_seconds)

    def connect(self, timeout: float = 5.0) -> StageLink:
        """Build the stage and register it with the configured local controller."""
        if not self.controller:
            raise ValueError("stage config has no controller address")
        return StageLink(self.build_stage(), self.controller, timeout)
