"""Request vocabulary and attribute hashing.

Every request reaching a stage carries an operation type, the class derived
from it, a size, a target (path or file descriptor) and the identity of the
user and job that issued it. Channels select requests by hashing a single
attribute into a 64-bit :data:`ClassifierToken`.

The hash is MurmurHash3 x64-128 (low 64 bits) over ``b"<attribute>:<value>"``
with seed :data:`HASH_SALT`. Both are fixed constants of the build, so tokens
computed by a controller and by a stage always agree.
"""

from __future__ import annotations

import enum
import functools
import posixpath
from dataclasses import dataclass, field
from typing import Union

HASH_SALT = 0

_MASK64 = 0xFFFFFFFFFFFFFFFF
_C1 = 0x87C37B91114253D5
_C2 = 0x4CF5AD432745937F

ClassifierToken = int
Target = Union[str, int]


class OpClass(str, enum.Enum):
    DATA = "data"
    METADATA = "metadata"
    EXTENDED_ATTRIBUTES = "extended_attributes"
    DIRECTORY_MANAGEMENT = "directory_management"


class OpType(str, enum.Enum):
    OPEN = "open"
    CLOSE = "close"
    READ = "read"
    WRITE = "write"
    GETATTR = "getattr"
    SETATTR = "setattr"
    RENAME = "rename"
    MKDIR = "mkdir"
    MKNOD = "mknod"
    RMDIR = "rmdir"
    STATFS = "statfs"
    SYNC = "sync"
    UNLINK = "unlink"


_OP_CLASS = {
    OpType.READ: OpClass.DATA,
    OpType.WRITE: OpClass.DATA,
    OpType.OPEN: OpClass.METADATA,
    OpType.CLOSE: OpClass.METADATA,
    OpType.RENAME: OpClass.METADATA,
    OpType.UNLINK: OpClass.METADATA,
    OpType.STATFS: OpClass.METADATA,
    OpType.SYNC: OpClass.METADATA,
    OpType.GETATTR: OpClass.EXTENDED_ATTRIBUTES,
    OpType.SETATTR: OpClass.EXTENDED_ATTRIBUTES,
    OpType.MKDIR: OpClass.DIRECTORY_MANAGEMENT,
    OpType.MKNOD: OpClass.DIRECTORY_MANAGEMENT,
    OpType.RMDIR: OpClass.DIRECTORY_MANAGEMENT,
}

# ops whose sink result is a new file descriptor
OPEN_LIKE = frozenset({OpType.OPEN})
CLOSE_LIKE = frozenset({OpType.CLOSE})


class Granularity(str, enum.Enum):
    """Which single request attribute a channel matcher hashes."""

    OP_TYPE = "op_type"
    OP_CLASS = "op_class"
    JOB = "job"
    USER = "user"


def op_class_of(op_type: OpType) -> OpClass:
    return _OP_CLASS[OpType(op_type)]


@dataclass(frozen=True)
class Request:
    """One POSIX-like operation submitted to a stage.

    ``target`` is a path for path-based calls and an integer for calls that
    go through a file descriptor. ``dest`` is only meaningful for rename.
    """

    op_type: OpType
    target: Target
    size: int = 0
    user_id: str = ""
    job_id: str = ""
    submit_time: int = 0
    dest: str | None = None
    op_class: OpClass = field(init=False)

    def __post_init__(self):
        op_type = OpType(self.op_type)
        op_class = _OP_CLASS[op_type]
        if self.size < 0:
            raise ValueError("request size must be >= 0")
        if self.size > 0 and op_class is not OpClass.DATA:
            raise ValueError(f"{op_type.value} is not a data op and cannot carry a size")
        if isinstance(self.target, bool) or not isinstance(self.target, (str, int)):
            raise TypeError("target must be a path string or a file descriptor")
        object.__setattr__(self, "op_type", op_type)
        object.__setattr__(self, "op_class", op_class)

    @property
    def is_fd_based(self) -> bool:
        return isinstance(self.target, int)


def normalize_path(path: str) -> str:
    """Normalize an absolute path; no trailing slash except for the root."""
    if not path.startswith("/"):
        raise ValueError(f"path must be absolute: {path!r}")
    norm = posixpath.normpath(path)
    # POSIX keeps a leading '//' as implementation defined; we do not
    if norm.startswith("//"):
        norm = "/" + norm.lstrip("/")
    return norm


def _rotl64(x: int, r: int) -> int:
    return ((x << r) | (x >> (64 - r))) & _MASK64


def _fmix64(k: int) -> int:
    k ^= k >> 33
    k = (k * 0xFF51AFD7ED558CCD) & _MASK64
    k ^= k >> 33
    k = (k * 0xC4CEB9FE1A85EC53) & _MASK64
    k ^= k >> 33
    return k


def murmur3_64(data: bytes, seed: int = 0) -> int:
    """Low 64 bits of MurmurHash3 x64-128 (same value as ``mmh3.hash64(...)[0]``, unsigned)."""
    length = len(data)
    h1 = h2 = seed & _MASK64
    nblocks = length // 16
    for i in range(nblocks):
        k1 = int.from_bytes(data[16 * i:16 * i + 8], "little")
        k2 = int.from_bytes(data[16 * i + 8:16 * i + 16], "little")

        k1 = (k1 * _C1) & _MASK64
        k1 = _rotl64(k1, 31)
        k1 = (k1 * _C2) & _MASK64
        h1 ^= k1
        h1 = _rotl64(h1, 27)
        h1 = (h1 + h2) & _MASK64
        h1 = (h1 * 5 + 0x52DCE729) & _MASK64

        k2 = (k2 * _C2) & _MASK64
        k2 = _rotl64(k2, 33)
        k2 = (k2 * _C1) & _MASK64
        h2 ^= k2
        h2 = _rotl64(h2, 31)
        h2 = (h2 + h1) & _MASK64
        h2 = (h2 * 5 + 0x38495AB5) & _MASK64

    tail = data[16 * nblocks:]
    rem = len(tail)
    if rem > 8:
        k2 = int.from_bytes(tail[8:], "little")
        k2 = (k2 * _C2) & _MASK64
        k2 = _rotl64(k2, 33)
        k2 = (k2 * _C1) & _MASK64
        h2 ^= k2
    if rem > 0:
        k1 = int.from_bytes(tail[:8], "little")
        k1 = (k1 * _C1) & _MASK64
        k1 = _rotl64(k1, 31)
        k1 = (k1 * _C2) & _MASK64
        h1 ^= k1

    h1 ^= length
    h2 ^= length
    h1 = (h1 + h2) & _MASK64
    h2 = (h2 + h1) & _MASK64
    h1 = _fmix64(h1)
    h2 = _fmix64(h2)
    h1 = (h1 + h2) & _MASK64
    return h1


def _attribute_value(granularity: Granularity, value) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    return str(value)


@functools.lru_cache(maxsize=65536)
def _token(granularity: Granularity, value: str) -> ClassifierToken:
    return murmur3_64(f"{granularity.value}:{value}".encode(), HASH_SALT)


def token_for(granularity: Granularity | str, value) -> ClassifierToken:
    """Token a channel matcher uses for ``value`` at ``granularity``."""
    granularity = Granularity(granularity)
    if granularity is Granularity.OP_TYPE:
        value = OpType(value)
    elif granularity is Granularity.OP_CLASS:
        value = OpClass(value)
    return _token(granularity, _attribute_value(granularity, value))


def classify(request: Request, granularity: Granularity | str) -> ClassifierToken:
    """Hash the attribute of ``request`` selected by ``granularity``."""
    granularity = Granularity(granularity)
    if granularity is Granularity.OP_TYPE:
        value = request.op_type.value
    elif granularity is Granularity.OP_CLASS:
        value = request.op_class.value
    elif granularity is Granularity.JOB:
        value = request.job_id
    else:
        value = request.user_id
    return _token(granularity, value)
