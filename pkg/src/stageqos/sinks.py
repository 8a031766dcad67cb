"""Backends a stage forwards requests to once they are granted."""

from __future__ import annotations

import itertools
import os
import threading
from pathlib import Path

from .requests import OpType, Request

_FIRST_FD = 3
_OPEN = OpType.OPEN


class NullSink:
    """Counts operations and hands out fresh descriptors for opens."""

    def __init__(self):
        self.count = 0
        self._fds = itertools.count(_FIRST_FD)

    def apply(self, request: Request):
        # itertools.count and += on an int attribute are good enough under the GIL
        self.count += 1
        if request.op_type is _OPEN:
            return next(self._fds)
        return None


class RecordingSink(NullSink):
    """Keeps every request it receives, in arrival order."""

    def __init__(self):
        super().__init__()
        self.log: list[Request] = []
        self._lock = threading.Lock()

    def apply(self, request: Request):
        with self._lock:
            self.log.append(request)
            return super().apply(request)


class DirectorySink:
    """Applies operations to a real directory tree rooted at ``root``.

    Request paths are absolute names in the managed namespace; ``/scratch/a``
    lands at ``<root>/scratch/a``. Anything resolving outside ``root`` is
    refused with ``PermissionError``.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)

    def resolve(self, path: str) -> Path:
        candidate = (self.root / path.lstrip("/")).resolve()
        if candidate != self.root and self.root not in candidate.parents:
            raise PermissionError(f"{path!r} escapes sink root")
        return candidate

    def apply(self, request: Request):
        op = request.op_type
        target = request.target
        if isinstance(target, int):
            return self._apply_fd(op, target, request)
        path = self.resolve(target)
        if op is OpType.OPEN:
            return os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
        if op is OpType.GETATTR:
            return os.stat(path)
        if op is OpType.SETATTR:
            os.utime(path)
            return None
        if op is OpType.RENAME:
            if request.dest is None:
                raise ValueError("rename needs a destination")
            os.rename(path, self.resolve(request.dest))
            return None
        if op is OpType.MKDIR:
            os.mkdir(path)
            return None
        if op is OpType.MKNOD:
            os.mknod(path)
            return None
        if op is OpType.RMDIR:
            os.rmdir(path)
            return None
        if op is OpType.UNLINK:
            os.unlink(path)
            return None
        if op is OpType.STATFS:
            return os.statvfs(path)
        if op is OpType.SYNC:
            os.sync()
            return None
        raise ValueError(f"{op.value} needs a file descriptor target")

    def _apply_fd(self, op: OpType, fd: int, request: Request):
        if op is OpType.CLOSE:
            os.close(fd)
            return None
        if op is OpType.READ:
            return os.read(fd, request.size)
        if op is OpType.WRITE:
            return os.write(fd, bytes(request.size))
        if op is OpType.GETATTR:
            return os.fstat(fd)
        if op is OpType.SYNC:
            os.fsync(fd)
            return None
        if op is OpType.STATFS:
            return os.fstatvfs(fd)
        raise ValueError(f"{op.value} is not valid on a file descriptor")


def make_sink(kind: str, root: str | None = None):
    if kind == "null":
        return NullSink()
    if kind == "recording":
        return RecordingSink()
    if kind == "directory":
        if not root:
            raise ValueError("directory sink needs a root")
        return DirectorySink(root)
    raise ValueError(f"unknown sink type {kind!r}")
