"""Binary control protocol between stages, local and global controllers.

Wire format (all integers little-endian)::

    frame   := length:u32  payload[length]
    payload := msg_type:u8  correlation_id:u64  body
    string  := n:u16  utf8[n]
    blob    := n:u32  utf8[n]
    rate    := f64 (IEEE-754)

Bodies per ``msg_type``::

    0x01 REGISTER_STAGE  stage_id:string job_id:string pid:u32 hostname:string user_id:string
    0x02 REGISTER_ACK    status:u8 stage_id:string detail:string
    0x03 COLLECT_REQ     (empty)
    0x04 COLLECT_RESP    count:u16 { stage_id:string job_id:string channel_id:u32
                                     ops:u64 bytes:u64 window_ns:u64 flags:u8 }*count
    0x05 RULE            stage_id:string channel_id:u32 kind:u8 params
                         kind 0 create_channel: granularity:u8 value:string rate:f64
                         kind 1 set_rate:       rate:f64
    0x06 RULE_ACK        status:u8 detail:string
    0x07 SET_POLICY      policy:blob (JSON text)
    0x08 POLICY_ACK      status:u8 detail:string

Every request type has exactly one response type and the response echoes
the request's correlation id. Granularity codes: 0 op_type, 1 op_class,
2 job, 3 user. Stats flags: bit 0 stale, bit 1 stage gone.
"""

from __future__ import annotations

import itertools
import logging
import queue
import socket
import struct
import threading
from dataclasses import dataclass, replace
from typing import Callable, Union

from .requests import Granularity
from .stage import CreateChannel, SetChannelRate, StageInfo

log = logging.getLogger(__name__)

MAX_FRAME = 16 * 1024 * 1024

STATUS_OK = 0
STATUS_ERROR = 1

FLAG_STALE = 0x01
FLAG_GONE = 0x02

REGISTER_STAGE = 0x01
REGISTER_ACK = 0x02
COLLECT_REQ = 0x03
COLLECT_RESP = 0x04
RULE = 0x05
RULE_ACK = 0x06
SET_POLICY = 0x07
POLICY_ACK = 0x08

_GRANULARITY_CODE = {
    Granularity.OP_TYPE: 0,
    Granularity.OP_CLASS: 1,
    Granularity.JOB: 2,
    Granularity.USER: 3,
}
_CODE_GRANULARITY = {v: k for k, v in _GRANULARITY_CODE.items()}

_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<BQ")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")
_STATS = struct.Struct("<IQQQB")


class ProtocolError(Exception):
    """Malformed or unknown message; the connection must be torn down."""


class IncompleteFrame(ProtocolError):
    """Not enough bytes yet for a whole frame."""


@dataclass(frozen=True)
class RegisterStage:
    info: StageInfo
    correlation_id: int = 0


@dataclass(frozen=True)
class RegisterAck:
    status: int
    stage_id: str = ""
    detail: str = ""
    correlation_id: int = 0


@dataclass(frozen=True)
class CollectReq:
    correlation_id: int = 0


@dataclass(frozen=True)
class StatsEntry:
    stage_id: str
    job_id: str
    channel_id: int
    ops: int
    bytes: int
    window_ns: int
    flags: int = 0

    @property
    def stale(self) -> bool:
        return bool(self.flags & FLAG_STALE)

    @property
    def gone(self) -> bool:
        return bool(self.flags & FLAG_GONE)


@dataclass(frozen=True)
class CollectResp:
    entries: tuple[StatsEntry, ...] = ()
    correlation_id: int = 0


@dataclass(frozen=True)
class Rule:
    stage_id: str
    action: Union[CreateChannel, SetChannelRate]
    correlation_id: int = 0


@dataclass(frozen=True)
class RuleAck:
    status: int
    detail: str = ""
    correlation_id: int = 0


@dataclass(frozen=True)
class SetPolicy:
    policy: str
    correlation_id: int = 0


@dataclass(frozen=True)
class PolicyAck:
    status: int
    detail: str = ""
    correlation_id: int = 0


Message = Union[RegisterStage, RegisterAck, CollectReq, CollectResp, Rule, RuleAck,
                SetPolicy, PolicyAck]

RESPONSE_FOR = {
    RegisterStage: RegisterAck,
    CollectReq: CollectResp,
    Rule: RuleAck,
    SetPolicy: PolicyAck,
}
RESPONSE_TYPES = frozenset(RESPONSE_FOR.values())


# -- codec -------------------------------------------------------------------

def _put_str(out: bytearray, text: str) -> None:
    data = text.encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValueError("string longer than 65535 bytes")
    out += _U16.pack(len(data))
    out += data


def _put_blob(out: bytearray, text: str) -> None:
    data = text.encode("utf-8")
    out += _U32.pack(len(data))
    out += data


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, st: struct.Struct):
        end = self.pos + st.size
        if end > len(self.buf):
            raise ProtocolError("body shorter than its declared fields")
        values = st.unpack_from(self.buf, self.pos)
        self.pos = end
        return values

    def u8(self) -> int:
        return self.take(_U8)[0]

    def u32(self) -> int:
        return self.take(_U32)[0]

    def f64(self) -> float:
        return self.take(_F64)[0]

    def _text(self, n: int) -> str:
        end = self.pos + n
        if end > len(self.buf):
            raise ProtocolError("string runs past the end of the frame")
        try:
            text = bytes(self.buf[self.pos:end]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"invalid utf-8: {exc}") from None
        self.pos = end
        return text

    def string(self) -> str:
        return self._text(self.take(_U16)[0])

    def blob(self) -> str:
        return self._text(self.take(_U32)[0])


def _encode_body(msg, out: bytearray) -> int:
    if isinstance(msg, RegisterStage):
        info = msg.info
        _put_str(out, info.stage_id)
        _put_str(out, info.job_id)
        out += _U32.pack(info.pid)
        _put_str(out, info.hostname)
        _put_str(out, info.user_id)
        return REGISTER_STAGE
    if isinstance(msg, RegisterAck):
        out += _U8.pack(msg.status)
        _put_str(out, msg.stage_id)
        _put_str(out, msg.detail)
        return REGISTER_ACK
    if isinstance(msg, CollectReq):
        return COLLECT_REQ
    if isinstance(msg, CollectResp):
        out += _U16.pack(len(msg.entries))
        for e in msg.entries:
            _put_str(out, e.stage_id)
            _put_str(out, e.job_id)
            out += _STATS.pack(e.channel_id, e.ops, e.bytes, e.window_ns, e.flags)
        return COLLECT_RESP
    if isinstance(msg, Rule):
        _put_str(out, msg.stage_id)
        action = msg.action
        out += _U32.pack(action.channel_id)
        if isinstance(action, CreateChannel):
            out += _U8.pack(0)
            out += _U8.pack(_GRANULARITY_CODE[action.granularity])
            _put_str(out, action.value)
            out += _F64.pack(action.rate)
        elif isinstance(action, SetChannelRate):
            out += _U8.pack(1)
            out += _F64.pack(action.rate)
        else:
            raise ValueError(f"unsupported rule action {action!r}")
        return RULE
    if isinstance(msg, RuleAck):
        out += _U8.pack(msg.status)
        _put_str(out, msg.detail)
        return RULE_ACK
    if isinstance(msg, SetPolicy):
        _put_blob(out, msg.policy)
        return SET_POLICY
    if isinstance(msg, PolicyAck):
        out += _U8.pack(msg.status)
        _put_str(out, msg.detail)
        return POLICY_ACK
    raise ValueError(f"not a protocol message: {msg!r}")


def encode(msg: Message) -> bytes:
    """Serialize ``msg`` into one length-prefixed frame."""
    body = bytearray()
    msg_type = _encode_body(msg, body)
    payload_len = _HEAD.size + len(body)
    if payload_len > MAX_FRAME:
        raise ValueError(f"frame of {payload_len} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(payload_len) + _HEAD.pack(msg_type, msg.correlation_id) + bytes(body)


def _decode_payload(payload) -> Message:
    if len(payload) < _HEAD.size:
        raise ProtocolError("payload shorter than its header")
    msg_type, cid = _HEAD.unpack_from(payload, 0)
    r = _Reader(payload, _HEAD.size)
    if msg_type == REGISTER_STAGE:
        stage_id = r.string()
        job_id = r.string()
        pid = r.u32()
        hostname = r.string()
        user_id = r.string()
        msg = RegisterStage(StageInfo(stage_id, job_id, pid, hostname, user_id), cid)
    elif msg_type == REGISTER_ACK:
        msg = RegisterAck(r.u8(), r.string(), r.string(), cid)
    elif msg_type == COLLECT_REQ:
        msg = CollectReq(cid)
    elif msg_type == COLLECT_RESP:
        count = r.take(_U16)[0]
        entries = []
        for _ in range(count):
            stage_id = r.string()
            job_id = r.string()
            channel_id, ops, nbytes, window_ns, flags = r.take(_STATS)
            entries.append(StatsEntry(stage_id, job_id, channel_id, ops, nbytes, window_ns, flags))
        msg = CollectResp(tuple(entries), cid)
    elif msg_type == RULE:
        stage_id = r.string()
        channel_id = r.u32()
        kind = r.u8()
        if kind == 0:
            code = r.u8()
            if code not in _CODE_GRANULARITY:
                raise ProtocolError(f"unknown granularity code {code}")
            value = r.string()
            rate = r.f64()
            try:
                action = CreateChannel(channel_id, _CODE_GRANULARITY[code], value, rate)
            except ValueError as exc:
                raise ProtocolError(str(exc)) from None
        elif kind == 1:
            try:
                action = SetChannelRate(channel_id, r.f64())
            except ValueError as exc:
                raise ProtocolError(str(exc)) from None
        else:
            raise ProtocolError(f"unknown rule kind {kind}")
        msg = Rule(stage_id, action, cid)
    elif msg_type == RULE_ACK:
        msg = RuleAck(r.u8(), r.string(), cid)
    elif msg_type == SET_POLICY:
        msg = SetPolicy(r.blob(), cid)
    elif msg_type == POLICY_ACK:
        msg = PolicyAck(r.u8(), r.string(), cid)
    else:
        raise ProtocolError(f"unknown msg_type 0x{msg_type:02x}")
    if r.pos != len(payload):
        raise ProtocolError(f"{len(payload) - r.pos} trailing bytes after message body")
    return msg


def decode_frame(buf, offset: int = 0) -> tuple[Message, int]:
    """Decode the frame starting at ``offset``; returns the message and the bytes consumed.

    Raises :class:`IncompleteFrame` when ``buf`` does not yet hold the whole
    frame and :class:`ProtocolError` when the frame is malformed.
    """
    available = len(buf) - offset
    if available < _LEN.size:
        raise IncompleteFrame(f"need {_LEN.size} header bytes, have {available}")
    (length,) = _LEN.unpack_from(buf, offset)
    if length > MAX_FRAME or length < _HEAD.size:
        raise ProtocolError(f"corrupt frame length {length}")
    if available < _LEN.size + length:
        raise IncompleteFrame(f"need {_LEN.size + length} bytes, have {available}")
    start = offset + _LEN.size
    msg = _decode_payload(memoryview(buf)[start:start + length])
    return msg, _LEN.size + length


def decode(data: bytes) -> Message:
    """Decode exactly one complete frame."""
    msg, used = decode_frame(data)
    if used != len(data):
        raise ProtocolError(f"{len(data) - used} bytes after the frame")
    return msg


# -- transport ---------------------------------------------------------------

def parse_address(address: str):
    """``host:port`` for loopback/TCP, ``unix:/path`` for a filesystem socket."""
    if address.startswith("unix:"):
        return socket.AF_UNIX, address[5:]
    host, _, port = address.rpartition(":")
    if not host:
        raise ValueError(f"bad address {address!r}")
    return socket.AF_INET, (host, int(port))


def format_address(family, sockaddr) -> str:
    if family == socket.AF_UNIX:
        return f"unix:{sockaddr}"
    return f"{sockaddr[0]}:{sockaddr[1]}"


def listen(address: str) -> socket.socket:
    family, sockaddr = parse_address(address)
    sock = socket.socket(family, socket.SOCK_STREAM)
    if family == socket.AF_INET:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind(sockaddr)
    sock.listen(128)
    return sock


def bound_address(sock: socket.socket) -> str:
    return format_address(sock.family, sock.getsockname())


def connect(address: str, timeout: float = 5.0) -> socket.socket:
    family, sockaddr = parse_address(address)
    sock = socket.create_connection(sockaddr, timeout=timeout) if family == socket.AF_INET \
        else socket.socket(family, socket.SOCK_STREAM)
    if family == socket.AF_UNIX:
        sock.settimeout(timeout)
        sock.connect(sockaddr)
    sock.settimeout(None)
    return sock


class _Slot:
    __slots__ = ("correlation_id", "event", "response", "error")

    def __init__(self, correlation_id: int):
        self.correlation_id = correlation_id
        self.event = threading.Event()
        self.response = None
        self.error = None

    def wait(self, timeout: float | None = None):
        if not self.event.wait(timeout):
            raise TimeoutError("no response before timeout")
        if self.error is not None:
            raise self.error
        return self.response


Handler = Callable[[Message], Message]


class Connection:
    """Bidirectional framed connection with request/response matching.

    A reader thread decodes incoming frames. Responses wake the caller that
    issued the matching request. Requests are queued to a worker thread that
    calls ``handler`` and sends its return value back with the same
    correlation id; keeping handlers off the reader means a handler may
    itself wait on another connection without starving this one. A protocol
    error tears the connection down.
    """

    def __init__(self, sock: socket.socket, handler: Handler | None = None, *,
                 on_close: Callable[["Connection"], None] | None = None, name: str = "conn"):
        if sock.family != socket.AF_UNIX:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.handler = handler
        self.on_close = on_close
        self.name = name
        self.closed = False
        self._ids = itertools.count(1)
        self._pending: dict[int, _Slot] = {}
        self._send_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._inbox: queue.SimpleQueue = queue.SimpleQueue()
        self._reader = threading.Thread(target=self._read_loop, name=f"{name}-reader", daemon=True)
        self._worker = threading.Thread(target=self._serve_loop, name=f"{name}-worker", daemon=True)

    def __repr__(self):
        return f"Connection({self.name!r}, closed={self.closed})"

    def start(self) -> "Connection":
        if self.handler is not None:
            self._worker.start()
        self._reader.start()
        return self

    def send(self, msg: Message) -> None:
        frame = encode(msg)
        with self._send_lock:
            if self.closed:
                raise ConnectionError(f"{self.name}: connection closed")
            self.sock.sendall(frame)

    def request_async(self, msg: Message) -> _Slot:
        cid = next(self._ids)
        slot = _Slot(cid)
        with self._state_lock:
            if self.closed:
                raise ConnectionError(f"{self.name}: connection closed")
            self._pending[cid] = slot
        try:
            self.send(replace(msg, correlation_id=cid))
        except OSError as exc:
            with self._state_lock:
                self._pending.pop(cid, None)
            raise ConnectionError(f"{self.name}: send failed: {exc}") from exc
        return slot

    def request(self, msg: Message, timeout: float | None = 5.0) -> Message:
        slot = self.request_async(msg)
        try:
            return slot.wait(timeout)
        finally:
            with self._state_lock:
                self._pending.pop(slot.correlation_id, None)

    def close(self) -> None:
        with self._state_lock:
            if self.closed:
                return
            self.closed = True
            pending = list(self._pending.values())
            self._pending.clear()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        for slot in pending:
            slot.error = ConnectionError(f"{self.name}: connection closed")
            slot.event.set()
        self._inbox.put(None)
        if self.on_close is not None:
            try:
                self.on_close(self)
            except Exception:
                log.exception("%s: on_close callback failed", self.name)

    def _dispatch(self, msg: Message) -> None:
        if type(msg) in RESPONSE_TYPES:
            with self._state_lock:
                slot = self._pending.pop(msg.correlation_id, None)
            if slot is None:
                log.debug("%s: dropping late response %r", self.name, msg)
                return
            slot.response = msg
            slot.event.set()
        elif self.handler is None:
            raise ProtocolError(f"{self.name}: peer sent a request to a client-only connection")
        else:
            self._inbox.put(msg)

    def _serve_loop(self) -> None:
        while True:
            msg = self._inbox.get()
            if msg is None:
                return
            try:
                self._serve(msg)
            except (OSError, ConnectionError):
                return

    def _serve(self, msg: Message) -> None:
        response_type = RESPONSE_FOR[type(msg)]
        try:
            response = self.handler(msg)
            if not isinstance(response, response_type):
                raise ProtocolError(f"handler answered {type(msg).__name__} with {response!r}")
        except Exception as exc:
            log.warning("%s: handler failed on %s: %s", self.name, type(msg).__name__, exc)
            if response_type is CollectResp:
                response = CollectResp(())
            else:
                response = response_type(STATUS_ERROR, detail=str(exc))
        self.send(replace(response, correlation_id=msg.correlation_id))

    def _read_loop(self) -> None:
        buf = bytearray()
        try:
            while True:
                chunk = self.sock.recv(65536)
                if not chunk:
                    break
                buf += chunk
                offset = 0
                while True:
                    try:
                        msg, used = decode_frame(buf, offset)
                    except IncompleteFrame:
                        break
                    offset += used
                    self._dispatch(msg)
                if offset:
                    del buf[:offset]
        except ProtocolError as exc:
            log.error("%s: protocol error, closing: %s", self.name, exc)
        except (OSError, ConnectionError):
            pass
        finally:
            self.close()
