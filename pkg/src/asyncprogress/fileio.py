"""Non-blocking explicit-offset file I/O with an optional rate throttle.

A transfer is split into chunks.  Each call that drives the request
(``test``/``wait`` here or in the runtime) issues at most one chunk, and a
throttled handle then stays busy for ``chunk / throttle`` seconds before the
next chunk may go.  As with the network, nothing moves while nobody drives
the request, which is exactly the behaviour of a library without
asynchronous I/O progress.
"""

from __future__ import annotations

import enum
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any

from .errors import AsyncProgressError, UsageError
from .runtime import ErrorCode, Request, RequestKind, RequestState, Status
from .transport import MessageEnvelope

DEFAULT_CHUNK = 4 * 1024 * 1024
NO_RANK = -1


class FileMode(enum.Enum):
    READ = "r"
    WRITE = "w"
    RDWR = "rw"


class FileIOError(AsyncProgressError):
    def __init__(self, message: str, error: ErrorCode = ErrorCode.IO):
        super().__init__(message)
        self.error = error


@dataclass
class FileHandle:
    path: str
    mode: FileMode
    throttle: float | None = None
    chunk_size: int = DEFAULT_CHUNK
    durable: bool = False
    fd: int = -1
    _busy: dict[str, Request] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def closed(self) -> bool:
        return self.fd < 0

    def close(self) -> None:
        if self._busy:
            raise UsageError(f"close with I/O in flight on {self.path}")
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def throttle_from_env() -> float | None:
    value = os.environ.get("APR_IO_THROTTLE", "")
    return float(value) if value else None


def file_open(path: str | os.PathLike, mode: FileMode | str = FileMode.READ, throttle: float | None = None,
              chunk_size: int = DEFAULT_CHUNK, durable: bool = False) -> FileHandle:
    """Open ``path``.  WRITE creates and truncates, RDWR creates without truncating."""
    mode = FileMode(mode)
    if throttle is None:
        throttle = throttle_from_env()
    if throttle is not None and throttle <= 0:
        raise UsageError("throttle must be positive")
    if chunk_size <= 0:
        raise UsageError("chunk_size must be positive")
    flags = {
        FileMode.READ: os.O_RDONLY,
        FileMode.WRITE: os.O_WRONLY | os.O_CREAT | os.O_TRUNC,
        FileMode.RDWR: os.O_RDWR | os.O_CREAT,
    }[mode]
    try:
        fd = os.open(os.fspath(path), flags, 0o644)
    except OSError as exc:
        raise FileIOError(f"cannot open {path}: {exc.strerror}") from None
    return FileHandle(os.fspath(path), mode, throttle, chunk_size, durable, fd)


class _Transfer:
    """Drives one file request chunk by chunk."""

    def __init__(self, req: Request, handle: FileHandle, offset: int, view: memoryview, direction: str):
        self.req = req
        self.handle = handle
        self.offset = offset
        self.view = view
        self.direction = direction
        self.done_bytes = 0
        self.eof = False
        self._due = 0.0
        self._lock = threading.Lock()

    def next_due(self) -> float | None:
        return None if self.req.completed else self._due

    def advance(self) -> bool:
        with self._lock:
            if self.req.completed:
                return False
            now = time.monotonic()
            if now < self._due:
                return False
            if self.done_bytes < len(self.view) and not self.eof:
                self._chunk(now)
                return True
            self._finish(ErrorCode.OK)
            return True

    def _chunk(self, now: float) -> None:
        h = self.handle
        if self.req.state is RequestState.PENDING:
            self.req.advance(RequestState.MATCHED)
            self.req.advance(RequestState.TRANSFERRING)
        n = min(h.chunk_size, len(self.view) - self.done_bytes)
        piece = self.view[self.done_bytes : self.done_bytes + n]
        pos = self.offset + self.done_bytes
        try:
            if self.direction == "write":
                written = 0
                while written < n:
                    written += os.pwrite(h.fd, piece[written:], pos + written)
                got = n
            else:
                data = os.pread(h.fd, n, pos)
                got = len(data)
                piece[:got] = data
                if got < n:
                    self.eof = True
        except OSError:
            self._finish(ErrorCode.IO)
            return
        self.done_bytes += got
        if h.throttle is not None:
            self._due = now + got / h.throttle
        if (self.done_bytes >= len(self.view) or self.eof) and self._due <= time.monotonic():
            self._finish(ErrorCode.OK)

    def _finish(self, error: ErrorCode) -> None:
        if error is ErrorCode.OK and self.direction == "write" and self.handle.durable:
            try:
                os.fsync(self.handle.fd)
            except OSError:
                error = ErrorCode.IO
        if self.req.state is RequestState.PENDING:
            self.req.advance(RequestState.MATCHED)
        with self.handle._lock:
            self.handle._busy.pop(self.direction, None)
        self.req.finish(Status(NO_RANK, NO_RANK, self.done_bytes, error))


def _start(handle: FileHandle, offset: int, buffer: Any, direction: str) -> Request:
    if handle.closed:
        raise UsageError(f"{handle.path} is closed")
    if offset < 0:
        raise UsageError("offset must be >= 0")
    if direction == "write" and handle.mode is FileMode.READ:
        raise UsageError(f"{handle.path} is open read-only")
    if direction == "read" and handle.mode is FileMode.WRITE:
        raise UsageError(f"{handle.path} is open write-only")
    view = memoryview(buffer).cast("B")
    if direction == "read" and view.readonly:
        raise UsageError("read buffer is read-only")
    kind = RequestKind.FILE_WRITE if direction == "write" else RequestKind.FILE_READ
    req = Request(kind, MessageEnvelope(0, 0, 0, 0, 0, len(view)), buffer)
    with handle._lock:
        if direction in handle._busy:
            raise UsageError(f"a {direction} is already in flight on {handle.path}")
        handle._busy[direction] = req
    req.driver = _Transfer(req, handle, offset, view, direction)
    return req


def iwrite_at(handle: FileHandle, offset: int, buffer: Any) -> Request:
    return _start(handle, offset, buffer, "write")


def iread_at(handle: FileHandle, offset: int, buffer: Any) -> Request:
    return _start(handle, offset, buffer, "read")


def _check(req: Request) -> _Transfer:
    if req.driver is None or not isinstance(req.driver, _Transfer):
        raise UsageError(f"request {req.id} is not a file request")
    if req.consumed:
        raise UsageError(f"request {req.id} was already completed and consumed")
    return req.driver


def test(req: Request) -> Status | None:
    driver = _check(req)
    driver.advance()
    if req.completed:
        req.consumed = True
        return req.status
    return None


def wait(req: Request) -> Status:
    driver = _check(req)
    while not req.completed:
        if not driver.advance():
            due = driver.next_due()
            if due is not None:
                time.sleep(max(0.0, min(due - time.monotonic(), 0.05)))
    req.consumed = True
    return req.status
