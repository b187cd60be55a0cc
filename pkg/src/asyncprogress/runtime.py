"""Non-blocking point-to-point message passing between ranks.

The runtime has no threads of its own.  Protocol work (answering a
request-to-send, pushing rendezvous data, draining sockets) happens only
inside calls into the library: every public call drives the engine once and
``wait`` keeps driving it until its request completes.  Without an external
progress thread, a large transfer therefore advances only while the
application sits in ``wait``/``test``.

Small messages (``<= eager_threshold`` bytes) are copied and shipped
unsolicited (EAGER_DATA); the send completes immediately.  Larger ones use
the rendezvous handshake RTS -> CTS -> RDV_DATA and complete when the last
byte has left the sender.
"""

from __future__ import annotations

import enum
import itertools
import logging
import os
import select
import socket
import threading
import time
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

from .errors import ProtocolError, StartupError, UsageError
from .transport import (
    DEFAULT_EAGER_THRESHOLD,
    ChannelHub,
    ChannelLink,
    Endpoint,
    Frame,
    FrameKind,
    Link,
    RDV_FRAGMENT,
    MessageEnvelope,
    establish_mesh,
    parse_endpoints,
)

log = logging.getLogger(__name__)

ANY_SOURCE = -1
ANY_TAG = -1
DEFAULT_UNEXPECTED_CAP = 64 * 1024 * 1024
# longest a blocked thread sleeps before re-checking without a wakeup
_MAX_BLOCK = 0.05
_CV_POLL = 0.001


class ThreadLevel(enum.IntEnum):
    SINGLE = 0
    FUNNELED = 1
    SERIALIZED = 2
    MULTIPLE = 3


class RequestKind(enum.Enum):
    SEND = "send"
    RECV = "recv"
    FILE_WRITE = "file_write"
    FILE_READ = "file_read"


class RequestState(enum.IntEnum):
    PENDING = 0
    MATCHED = 1
    TRANSFERRING = 2
    COMPLETE = 3
    ERRORED = 4


class ErrorCode(enum.Enum):
    OK = "ok"
    TRUNCATED = "truncated"
    PROTOCOL = "protocol"
    CANCELLED = "cancelled"
    IO = "io"


@dataclass(frozen=True)
class Status:
    source: int
    tag: int
    received_bytes: int
    error: ErrorCode = ErrorCode.OK


@dataclass(frozen=True)
class Communicator:
    context_id: int
    ranks: tuple[int, ...]
    my_rank: int

    @property
    def size(self) -> int:
        return len(self.ranks)


class Request:
    """Handle of one in-flight non-blocking operation.

    A request is consumed by the ``test``/``wait`` call that reports its
    completion; using it again is a usage error.
    """

    _ids = itertools.count(1)

    def __init__(self, kind: RequestKind, envelope: MessageEnvelope, buffer: Any, owner: Any = None):
        self.id = next(self._ids)
        self.kind = kind
        self.state = RequestState.PENDING
        self.envelope = envelope
        self.buffer = buffer
        self.status: Status | None = None
        self.owner = owner
        # set by non-network requests that advance through explicit steps
        self.driver: Any = None
        self.submitter = threading.get_ident()
        self.consumed = False
        self._waiter: int | None = None

    @property
    def completed(self) -> bool:
        return self.state >= RequestState.COMPLETE

    def advance(self, state: RequestState) -> None:
        if self.completed:
            raise UsageError(f"request {self.id} already finished")
        if state < self.state:
            raise ValueError(f"request {self.id}: {self.state.name} -> {state.name} is not monotone")
        self.state = state

    def finish(self, status: Status) -> None:
        if self.completed:
            raise UsageError(f"request {self.id} already finished")
        self.status = status
        self.state = RequestState.COMPLETE if status.error is ErrorCode.OK else RequestState.ERRORED

    def __repr__(self) -> str:
        env = self.envelope
        return f"<Request {self.id} {self.kind.value} {self.state.name} src={env.source} dst={env.dest} tag={env.tag}>"


@dataclass
class UnexpectedMessage:
    envelope: MessageEnvelope
    # None for a request-to-send whose data has not been asked for yet
    payload: bytes | bytearray | None = None


class _Inbound:
    """Receive side of one rendezvous transfer, filled fragment by fragment."""

    def __init__(self, req: Request, envelope: MessageEnvelope):
        self.req = req
        self.envelope = envelope
        self.view = memoryview(req.buffer).cast("B")
        self.received = 0

    def add(self, payload, peer: int) -> bool:
        """Copy one fragment in; True once the whole message has arrived."""
        start = self.received
        n = len(payload)
        if start + n > self.envelope.length:
            raise ProtocolError(f"rendezvous data overruns announced length {self.envelope.length}", peer)
        fit = max(0, min(n, len(self.view) - start))
        if fit:
            self.view[start : start + fit] = memoryview(payload)[:fit]
        self.received += n
        return self.received == self.envelope.length

    def status(self) -> Status:
        length = self.envelope.length
        error = ErrorCode.TRUNCATED if length > len(self.view) else ErrorCode.OK
        return Status(self.envelope.source, self.envelope.tag, min(length, len(self.view)), error)


def envelope_matches(pattern: MessageEnvelope, envelope: MessageEnvelope) -> bool:
    return (
        pattern.context_id == envelope.context_id
        and pattern.source in (ANY_SOURCE, envelope.source)
        and pattern.tag in (ANY_TAG, envelope.tag)
    )


def match_incoming(
    envelope: MessageEnvelope,
    posted: list,
    unexpected: list,
    payload: bytes | bytearray | None = None,
):
    """Match an arriving message against the posted receives.

    The first posted receive (in posting order) whose pattern accepts the
    envelope is removed from ``posted`` and returned.  Otherwise the message
    is appended to ``unexpected`` and None is returned.  ``posted`` holds
    anything with an ``envelope`` attribute.
    """
    for i, req in enumerate(posted):
        if envelope_matches(req.envelope, envelope):
            del posted[i]
            return req
    unexpected.append(UnexpectedMessage(envelope, payload))
    return None


@dataclass
class Job:
    """Everything a rank needs to join a job."""

    rank: int
    size: int
    endpoints: list[Endpoint]
    listener: socket.socket | None = None
    link_bandwidth: float | None = None
    local_index: int = 0

    @classmethod
    def from_env(cls, environ: Mapping[str, str] | None = None) -> "Job":
        env = os.environ if environ is None else environ
        try:
            rank = int(env.get("APR_RANK", "0"))
            size = int(env.get("APR_SIZE", "1"))
        except ValueError as exc:
            raise StartupError(f"bad APR_RANK/APR_SIZE: {exc}") from None
        text = env.get("APR_ENDPOINTS", "")
        if text:
            endpoints = parse_endpoints(text)
        elif size == 1:
            endpoints = [Endpoint(0, ("127.0.0.1", 0))]
        else:
            raise StartupError("APR_ENDPOINTS is required when APR_SIZE > 1", rank)
        if len(endpoints) != size:
            raise StartupError(f"{len(endpoints)} endpoints for a job of size {size}", rank)
        listener = None
        if env.get("APR_LISTEN_FD"):
            listener = socket.socket(fileno=int(env["APR_LISTEN_FD"]))
        bw = env.get("APR_LINK_BANDWIDTH")
        return cls(
            rank=rank,
            size=size,
            endpoints=endpoints,
            listener=listener,
            link_bandwidth=float(bw) if bw else None,
            local_index=int(env.get("APR_LOCAL_INDEX", str(rank))),
        )

    @classmethod
    def inproc(cls, hub: ChannelHub, rank: int) -> "Job":
        return cls(rank=rank, size=hub.size, endpoints=hub.endpoints(), local_index=rank)

    @property
    def key(self) -> tuple:
        return (self.rank, self.endpoints[self.rank].address)


@dataclass
class Diagnostics:
    progress_calls: int = 0
    frames_in: int = 0
    frames_out: int = 0
    unexpected_high_water: int = 0


_live: set[tuple] = set()
_live_lock = threading.Lock()


def eager_threshold_from_env(environ: Mapping[str, str] | None = None) -> int:
    env = os.environ if environ is None else environ
    value = env.get("APR_EAGER_THRESHOLD", "")
    return int(value) if value else DEFAULT_EAGER_THRESHOLD


def init(
    job: Job | None = None,
    thread_level: ThreadLevel = ThreadLevel.SINGLE,
    *,
    eager_threshold: int | None = None,
    unexpected_cap: int = DEFAULT_UNEXPECTED_CAP,
    trace: bool = False,
) -> "Runtime":
    """Join the job and return the per-rank runtime context.

    Any thread level may be requested; MULTIPLE is always granted.
    """
    job = Job.from_env() if job is None else job
    key = job.key
    with _live_lock:
        if key in _live:
            raise UsageError(f"rank {job.rank} is already initialized")
        _live.add(key)
    try:
        links = establish_mesh(job.rank, job.endpoints, job.listener, job.link_bandwidth)
    except BaseException:
        with _live_lock:
            _live.discard(key)
        raise
    threshold = eager_threshold_from_env() if eager_threshold is None else eager_threshold
    rt = Runtime(job, links, threshold, unexpected_cap, trace)
    rt.requested_thread_level = ThreadLevel(thread_level)
    return rt


class Runtime:
    def __init__(self, job: Job, links: dict[int, Link], eager_threshold: int,
                 unexpected_cap: int = DEFAULT_UNEXPECTED_CAP, trace: bool = False):
        if eager_threshold < 0:
            raise UsageError("eager threshold must be >= 0")
        self.job = job
        self.rank = job.rank
        self.size = job.size
        self.local_index = job.local_index
        self.eager_threshold = eager_threshold
        self.unexpected_cap = unexpected_cap
        self.thread_level = ThreadLevel.MULTIPLE
        self.requested_thread_level = ThreadLevel.MULTIPLE
        self.world = Communicator(0, tuple(range(self.size)), self.rank)
        self.diagnostics = Diagnostics()
        self.trace: list[tuple] | None = [] if trace else None

        self.links = links
        self._link_list = [links[r] for r in sorted(links)]
        self._lock = threading.Lock()
        self._posted: list[Request] = []
        self._unexpected: list[UnexpectedMessage] = []
        self._unexpected_bytes: dict[int, int] = {}
        self._send_seq: dict[tuple[int, int], int] = {}
        self._recv_seq: dict[tuple[int, int], int] = {}
        self._rdv_sends: dict[tuple[int, int, int], Request] = {}
        self._rdv_recvs: dict[tuple[int, int, int], _Inbound] = {}
        self._active: dict[int, Request] = {}
        self._shutdown_from: set[int] = set()
        self._next_context = 1
        self._finalized = False

        self._cv = threading.Condition()
        self._generation = 0
        self._io_role = threading.Lock()
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._wake_w.setblocking(False)
        for link in self._link_list:
            if isinstance(link, ChannelLink):
                link.waker = self.wakeup

    # -- communicators -----------------------------------------------------
    def dup(self, comm: Communicator | None = None) -> Communicator:
        """New communicator over the same ranks with a fresh context id.

        All ranks must call this in the same order to agree on the id.
        """
        comm = comm or self.world
        with self._lock:
            ctx = self._next_context
            self._next_context += 1
        return Communicator(ctx, comm.ranks, comm.my_rank)

    # -- point to point ----------------------------------------------------
    def isend(self, buffer: Any, dest: int, tag: int = 0, comm: Communicator | None = None) -> Request:
        comm = comm or self.world
        self._check_alive()
        if not 0 <= dest < comm.size:
            raise UsageError(f"invalid destination rank {dest} for communicator of size {comm.size}")
        if tag < 0:
            raise UsageError(f"invalid tag {tag}")
        payload = memoryview(buffer).cast("B")
        nbytes = len(payload)
        peer = comm.ranks[dest]
        with self._lock:
            key = (peer, comm.context_id)
            seq = self._send_seq.get(key, 0)
            self._send_seq[key] = seq + 1
            env = MessageEnvelope(comm.context_id, tag, comm.my_rank, dest, seq, nbytes)
            req = Request(RequestKind.SEND, env, buffer, self)
            link = self.links[peer]
            if nbytes <= self.eager_threshold:
                link.send_frame(Frame(FrameKind.EAGER_DATA, env, bytes(payload)),
                                eager_threshold=self.eager_threshold)
                req.advance(RequestState.MATCHED)
                req.advance(RequestState.TRANSFERRING)
                req.finish(Status(comm.my_rank, tag, nbytes))
            else:
                self._active[req.id] = req
                self._rdv_sends[(peer, comm.context_id, seq)] = req
                link.send_frame(Frame(FrameKind.RTS, env))
            self.diagnostics.frames_out += 1
            self._progress_locked()
        return req

    def irecv(self, buffer: Any, source: int = ANY_SOURCE, tag: int = ANY_TAG,
              comm: Communicator | None = None) -> Request:
        comm = comm or self.world
        self._check_alive()
        if source != ANY_SOURCE and not 0 <= source < comm.size:
            raise UsageError(f"invalid source rank {source} for communicator of size {comm.size}")
        if tag < 0 and tag != ANY_TAG:
            raise UsageError(f"invalid tag {tag}")
        view = memoryview(buffer)
        if view.readonly:
            raise UsageError("receive buffer is read-only")
        pattern = MessageEnvelope(comm.context_id, tag, source, comm.my_rank, 0, view.nbytes)
        with self._lock:
            req = Request(RequestKind.RECV, pattern, buffer, self)
            self._active[req.id] = req
            if self.trace is not None:
                self.trace.append(("post", req.id, source, tag))
            for i, msg in enumerate(self._unexpected):
                if envelope_matches(pattern, msg.envelope):
                    del self._unexpected[i]
                    self._on_match(req, msg.envelope, msg.payload)
                    break
            else:
                self._posted.append(req)
            self._progress_locked()
        return req

    # -- completion --------------------------------------------------------
    def test(self, req: Request) -> Status | None:
        self._check_request(req)
        if req._waiter is not None and req._waiter != threading.get_ident():
            raise UsageError(f"request {req.id} is being waited on by another thread")
        if not req.completed:
            if req.driver is not None:
                req.driver.advance()
            self.progress()
        if req.completed:
            req.consumed = True
            return req.status
        return None

    def wait(self, req: Request) -> Status:
        self._check_request(req)
        me = threading.get_ident()
        if req._waiter is not None and req._waiter != me:
            raise UsageError(f"request {req.id} is being waited on by another thread")
        req._waiter = me
        try:
            while True:
                gen = self._generation
                if req.driver is not None and not req.completed:
                    req.driver.advance()
                if not req.completed:
                    self.progress()
                if req.completed:
                    break
                self.block(_MAX_BLOCK, (req,), gen)
        finally:
            req._waiter = None
        req.consumed = True
        return req.status

    def test_some(self, reqs: Sequence[Request]) -> list[tuple[int, Status]]:
        """Non-blocking; consume and return every completed request."""
        for req in reqs:
            self._check_request(req)
        for req in reqs:
            if req.driver is not None and not req.completed:
                req.driver.advance()
        self.progress()
        done = []
        for i, req in enumerate(reqs):
            if req.completed:
                req.consumed = True
                done.append((i, req.status))
        return done

    def wait_any(self, reqs: Sequence[Request], timeout: float | None = None) -> tuple[int, Status] | None:
        """Block until one request completes; return its index and status.

        With ``timeout`` set, return None if nothing completed in time.
        """
        if not reqs:
            raise UsageError("wait_any needs at least one request")
        for req in reqs:
            self._check_request(req)
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            gen = self._generation
            for req in reqs:
                if req.driver is not None and not req.completed:
                    req.driver.advance()
            self.progress()
            for i, req in enumerate(reqs):
                if req.completed:
                    req.consumed = True
                    return i, req.status
            budget = _MAX_BLOCK
            if deadline is not None:
                budget = deadline - time.monotonic()
                if budget <= 0:
                    return None
            self.block(min(budget, _MAX_BLOCK), reqs, gen)

    def wait_all(self, reqs: Sequence[Request]) -> list[Status]:
        return [self.wait(req) for req in reqs]

    # -- file I/O ----------------------------------------------------------
    def file_iwrite_at(self, handle, offset: int, buffer: Any) -> Request:
        from . import fileio

        return fileio.iwrite_at(handle, offset, buffer)

    def file_iread_at(self, handle, offset: int, buffer: Any) -> Request:
        from . import fileio

        return fileio.iread_at(handle, offset, buffer)

    # -- engine ------------------------------------------------------------
    def progress(self) -> bool:
        """Drive the protocol engine once without blocking."""
        with self._lock:
            self._check_alive()
            changed = self._progress_locked()
        if changed:
            self._notify()
        return changed

    def wakeup(self) -> None:
        try:
            self._wake_w.send(b"\0")
        except (BlockingIOError, OSError):
            pass

    def block(self, timeout: float, reqs: Sequence[Request] = (), generation: int | None = None) -> None:
        """Sleep until traffic arrives, something completes, or ``timeout``.

        One thread at a time sleeps in ``select`` on the links; any others
        wait on a condition that is signalled whenever progress changes state.
        """
        now = time.monotonic()
        due = [now + timeout]
        for link in self._link_list:
            t = link.next_due()
            if t is not None:
                due.append(t)
        for req in reqs:
            if req.driver is not None:
                t = req.driver.next_due()
                if t is not None:
                    due.append(t)
        timeout = max(0.0, min(due) - now)
        if timeout == 0.0:
            return
        if self._io_role.acquire(blocking=False):
            try:
                if generation is not None and generation != self._generation:
                    return
                rlist = [self._wake_r]
                wlist = []
                for link in self._link_list:
                    fd = link.fileno()
                    if fd is None:
                        continue
                    rlist.append(fd)
                    if link.wants_write and link.next_due() is None:
                        wlist.append(fd)
                try:
                    select.select(rlist, wlist, [], timeout)
                except (OSError, ValueError):
                    # a link closed underneath us during finalize
                    time.sleep(min(timeout, _CV_POLL))
            finally:
                self._io_role.release()
        else:
            with self._cv:
                if generation is None or generation == self._generation:
                    self._cv.wait(min(timeout, _CV_POLL))

    def set_link_bandwidth(self, bandwidth: float | None) -> None:
        """Change the injected per-byte delay on all links to other ranks."""
        with self._lock:
            for peer, link in self.links.items():
                if peer != self.rank:
                    link.pacer.bandwidth = bandwidth

    @property
    def outstanding(self) -> list[Request]:
        with self._lock:
            return list(self._active.values())

    @property
    def unexpected_count(self) -> int:
        return len(self._unexpected)

    def finalize(self, timeout: float = 120.0) -> None:
        with self._lock:
            self._check_alive()
            if self._active:
                pending = ", ".join(repr(r) for r in self._active.values())
                raise UsageError(f"finalize with outstanding requests: {pending}")
            for peer, link in self.links.items():
                if peer != self.rank:
                    link.send_frame(Frame(FrameKind.SHUTDOWN, MessageEnvelope(0, 0, self.rank, peer)))
            self._progress_locked()
        peers = {p for p in self.links if p != self.rank}
        deadline = time.monotonic() + timeout
        while True:
            gen = self._generation
            with self._lock:
                self._progress_locked()
                drained = all(link.pending_bytes == 0 for link in self._link_list)
                done = drained and peers <= self._shutdown_from
            if done:
                break
            if time.monotonic() > deadline:
                missing = sorted(peers - self._shutdown_from)
                raise ProtocolError(f"finalize timed out waiting for ranks {missing}", self.rank)
            self.block(_MAX_BLOCK, (), gen)
        with self._lock:
            self._finalized = True
            for link in self._link_list:
                link.close()
        self._wake_r.close()
        self._wake_w.close()
        with _live_lock:
            _live.discard(self.job.key)

    @property
    def finalized(self) -> bool:
        return self._finalized

    # -- internals ---------------------------------------------------------
    def _check_alive(self) -> None:
        if self._finalized:
            raise UsageError("runtime already finalized")

    def _check_request(self, req: Request) -> None:
        self._check_alive()
        if req.owner is not None and req.owner is not self:
            raise UsageError(f"request {req.id} belongs to another runtime")
        if req.owner is None and req.driver is None:
            raise UsageError(f"request {req.id} cannot be progressed by this runtime")
        if req.consumed:
            raise UsageError(f"request {req.id} was already completed and consumed")

    def _notify(self) -> None:
        with self._cv:
            self._generation += 1
            self._cv.notify_all()
        if self._io_role.locked():
            self.wakeup()

    def _complete(self, req: Request, status: Status) -> None:
        req.finish(status)
        self._active.pop(req.id, None)

    def _progress_locked(self) -> bool:
        self.diagnostics.progress_calls += 1
        changed = False
        try:
            while self._wake_r.recv(4096):
                pass
        except (BlockingIOError, OSError):
            pass
        for link in self._link_list:
            if link.closed:
                continue
            if link.wants_write:
                changed |= link.flush()
            frames = link.receive()
            for frame in frames:
                self._dispatch(link.peer, frame)
            if frames:
                changed = True
                if link.wants_write:
                    link.flush()
        for link in self._link_list:
            if link.wants_write and not link.closed:
                changed |= link.flush()
        return changed

    def _check_seq(self, peer: int, env: MessageEnvelope) -> None:
        key = (peer, env.context_id)
        expected = self._recv_seq.get(key, 0)
        if env.seq != expected:
            raise ProtocolError(f"sequence {env.seq} arrived, expected {expected}", peer)
        self._recv_seq[key] = expected + 1

    def _dispatch(self, peer: int, frame: Frame) -> None:
        self.diagnostics.frames_in += 1
        env = frame.envelope
        kind = frame.kind
        if kind is FrameKind.EAGER_DATA or kind is FrameKind.RTS:
            self._check_seq(peer, env)
            if self.trace is not None:
                self.trace.append(("arrive", env.source, env.tag, env.seq, env.context_id))
            payload = frame.payload if kind is FrameKind.EAGER_DATA else None
            req = match_incoming(env, self._posted, self._unexpected, payload)
            if req is not None:
                self._on_match(req, env, payload)
            else:
                if payload is not None:
                    held = self._unexpected_bytes.get(peer, 0) + len(payload)
                    if held > self.unexpected_cap:
                        raise ProtocolError(
                            f"unexpected-message buffer overflow ({held} > {self.unexpected_cap} bytes)", peer
                        )
                    self._unexpected_bytes[peer] = held
                self.diagnostics.unexpected_high_water = max(
                    self.diagnostics.unexpected_high_water, len(self._unexpected)
                )
        elif kind is FrameKind.CTS:
            req = self._rdv_sends.pop((peer, env.context_id, env.seq), None)
            if req is None:
                raise ProtocolError(f"clear-to-send for unknown message seq {env.seq}", peer)
            req.advance(RequestState.MATCHED)
            data_env = req.envelope
            view = memoryview(req.buffer).cast("B")
            link = self.links[peer]
            starts = range(0, data_env.length, RDV_FRAGMENT)
            for start in starts:
                piece = view[start : start + RDV_FRAGMENT]
                last = start == starts[-1]
                link.send_frame(
                    Frame(FrameKind.RDV_DATA, replace(data_env, length=len(piece)), piece),
                    on_sent=(lambda: self._complete(req, Status(data_env.source, data_env.tag, data_env.length)))
                    if last else None,
                )
                self.diagnostics.frames_out += 1
            req.advance(RequestState.TRANSFERRING)
        elif kind is FrameKind.RDV_DATA:
            key = (peer, env.context_id, env.seq)
            transfer = self._rdv_recvs.get(key)
            if transfer is None:
                raise ProtocolError(f"rendezvous data without clear-to-send (seq {env.seq})", peer)
            if transfer.add(frame.payload, peer):
                del self._rdv_recvs[key]
                self._complete(transfer.req, transfer.status())
        elif kind is FrameKind.SHUTDOWN:
            self._shutdown_from.add(peer)
        else:
            log.debug("ignoring %s frame from rank %d", kind.name, peer)

    def _on_match(self, req: Request, env: MessageEnvelope, payload) -> None:
        if self.trace is not None:
            self.trace.append(("match", req.id, env.source, env.seq, env.context_id))
        req.advance(RequestState.MATCHED)
        if payload is not None:
            peer = self.world.ranks[env.source]
            if peer in self._unexpected_bytes:
                self._unexpected_bytes[peer] = max(0, self._unexpected_bytes[peer] - len(payload))
            self._deliver(req, env, payload)
            return
        peer = self.world.ranks[env.source]
        self._rdv_recvs[(peer, env.context_id, env.seq)] = _Inbound(req, env)
        cts = MessageEnvelope(env.context_id, env.tag, self.rank, env.source, env.seq, env.length)
        self.links[peer].send_frame(Frame(FrameKind.CTS, cts))
        self.diagnostics.frames_out += 1
        req.advance(RequestState.TRANSFERRING)

    def _deliver(self, req: Request, env: MessageEnvelope, payload) -> None:
        if req.state < RequestState.TRANSFERRING:
            req.advance(RequestState.TRANSFERRING)
        view = memoryview(req.buffer).cast("B")
        n = min(len(payload), len(view))
        view[:n] = memoryview(payload)[:n]
        error = ErrorCode.TRUNCATED if len(payload) > len(view) else ErrorCode.OK
        self._complete(req, Status(env.source, env.tag, n, error))
