"""Byte transport between the ranks of one job.

Every pair of ranks shares one ordered byte stream (a TCP socket, or an
in-process channel for threads-as-ranks tests).  Messages travel as
length-prefixed frames::

    [length u32][kind u8][comm u32][tag i32][src u32][dst u32][seq u64][payload_len u64][payload]

All integers are little-endian.  ``length`` counts everything after itself.
``payload_len`` is the length field of the envelope.  It equals the number
of payload bytes for EAGER_DATA and RDV_DATA frames, while RTS/CTS frames
carry the announced message length with no payload bytes.  Rendezvous data
travels as consecutive RDV_DATA fragments of at most ``RDV_FRAGMENT`` bytes,
each carrying the message's seq.

Links never block.  They are flushed and drained by whoever drives progress,
so a transfer only advances while some thread is inside the library.  An
optional :class:`Pacer` caps the outgoing rate of a link to make transfer
times long and stable enough to measure overlap on a single machine.
"""

from __future__ import annotations

import collections
import enum
import itertools
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable

from .errors import EncodingError, ProtocolError, StartupError

log = logging.getLogger(__name__)

HEADER = struct.Struct("<IBIiIIQQ")
HEADER_SIZE = HEADER.size  # 37
LENGTH_PREFIX = 4
# bytes counted by the length field besides the payload
ENVELOPE_SIZE = HEADER_SIZE - LENGTH_PREFIX  # 33
MAX_LENGTH = 2**32 - 1

DEFAULT_EAGER_THRESHOLD = 256 * 1024
RECV_CHUNK = 1 << 20
RDV_FRAGMENT = 64 * 1024


class FrameKind(enum.IntEnum):
    EAGER_DATA = 1
    RTS = 2
    CTS = 3
    RDV_DATA = 4
    FILEIO_CONTROL = 5
    SHUTDOWN = 6


_DATA_KINDS = (FrameKind.EAGER_DATA, FrameKind.RDV_DATA)
_EMPTY_KINDS = (FrameKind.RTS, FrameKind.CTS, FrameKind.SHUTDOWN)


@dataclass(frozen=True)
class MessageEnvelope:
    """Addressing and matching metadata of one message.

    On the wire ``source`` and ``tag`` are always concrete; wildcards exist
    only in receive-side match patterns.
    """

    context_id: int
    tag: int
    source: int
    dest: int
    seq: int = 0
    length: int = 0


@dataclass
class Frame:
    kind: FrameKind
    envelope: MessageEnvelope
    payload: bytes | bytearray | memoryview = b""

    def validate(self, eager_threshold: int | None = None) -> None:
        n = len(self.payload)
        if self.kind in _EMPTY_KINDS and n:
            raise EncodingError(f"{self.kind.name} frames carry no payload, got {n} bytes")
        if self.kind in _DATA_KINDS and n != self.envelope.length:
            raise EncodingError(
                f"{self.kind.name} payload is {n} bytes but envelope announces {self.envelope.length}"
            )
        if (
            self.kind is FrameKind.EAGER_DATA
            and eager_threshold is not None
            and n > eager_threshold
        ):
            raise EncodingError(
                f"EAGER_DATA payload of {n} bytes exceeds eager threshold {eager_threshold}"
            )


def frame_header(frame: Frame, eager_threshold: int | None = None) -> bytes:
    """Encode everything but the payload; links send the payload zero-copy."""
    n = len(frame.payload)
    if n > MAX_LENGTH - ENVELOPE_SIZE:
        raise EncodingError(f"payload of {n} bytes does not fit a u32 length prefix")
    frame.validate(eager_threshold)
    env = frame.envelope
    try:
        return HEADER.pack(
            ENVELOPE_SIZE + n,
            int(frame.kind),
            env.context_id,
            env.tag,
            env.source,
            env.dest,
            env.seq,
            env.length,
        )
    except struct.error as exc:
        raise EncodingError(f"envelope field out of range: {exc}") from None


def encode_frame(frame: Frame, eager_threshold: int | None = None) -> bytes:
    return frame_header(frame, eager_threshold) + bytes(frame.payload)


def _check_header(fields: tuple, peer: int | None) -> tuple[FrameKind, MessageEnvelope, int]:
    length, kind, ctx, tag, src, dst, seq, plen = fields
    if length < ENVELOPE_SIZE:
        raise ProtocolError(f"frame length {length} shorter than envelope", peer)
    try:
        kind = FrameKind(kind)
    except ValueError:
        raise ProtocolError(f"unknown frame kind {kind}", peer) from None
    nbytes = length - ENVELOPE_SIZE
    if kind in _DATA_KINDS and nbytes != plen:
        raise ProtocolError(
            f"{kind.name} length mismatch: {nbytes} payload bytes, payload_len {plen}", peer
        )
    if kind in _EMPTY_KINDS and nbytes:
        raise ProtocolError(f"{kind.name} frame carries {nbytes} payload bytes", peer)
    return kind, MessageEnvelope(ctx, tag, src, dst, seq, plen), nbytes


def decode_frame(data: bytes | bytearray | memoryview, peer: int | None = None) -> tuple[Frame | None, int]:
    """Decode one frame from the front of ``data``.

    Returns ``(frame, consumed)``, or ``(None, 0)`` when ``data`` holds no
    complete frame yet.
    """
    if len(data) < HEADER_SIZE:
        return None, 0
    kind, env, nbytes = _check_header(HEADER.unpack_from(data, 0), peer)
    end = HEADER_SIZE + nbytes
    if len(data) < end:
        return None, 0
    return Frame(kind, env, bytes(data[HEADER_SIZE:end])), end


class FrameDecoder:
    """Incremental decoder for a byte stream arriving in arbitrary pieces."""

    def __init__(self, peer: int | None = None):
        self.peer = peer
        self._head = bytearray()
        self._pending: tuple[FrameKind, MessageEnvelope] | None = None
        self._payload = bytearray()
        self._filled = 0

    @property
    def idle(self) -> bool:
        """True when no partial frame is buffered."""
        return self._pending is None and not self._head

    def feed(self, data: bytes | bytearray | memoryview) -> list[Frame]:
        frames = []
        mv = memoryview(data).cast("B")
        while True:
            if self._pending is None:
                need = HEADER_SIZE - len(self._head)
                self._head += mv[:need]
                mv = mv[need:]
                if len(self._head) < HEADER_SIZE:
                    break
                kind, env, nbytes = _check_header(HEADER.unpack(self._head), self.peer)
                self._head.clear()
                self._pending = (kind, env)
                self._payload = bytearray(nbytes)
                self._filled = 0
            want = len(self._payload) - self._filled
            take = min(want, len(mv))
            if take:
                self._payload[self._filled : self._filled + take] = mv[:take]
                self._filled += take
                mv = mv[take:]
            if self._filled < len(self._payload):
                break
            kind, env = self._pending
            frames.append(Frame(kind, env, self._payload))
            self._pending = None
            self._payload = bytearray()
            if not mv:
                break
        return frames


class Pacer:
    """Caps a link's outgoing byte rate.

    Credit accrues only during a busy period, which starts at the first flush
    after the outbox became non-empty and ends when it drains.  Unused credit
    is capped at ``backlog`` bytes, so a link nobody flushes for a while does
    not send the missed bytes in one burst afterwards: every fragment of a
    transfer needs a driving call close to when it is due.
    """

    def __init__(self, bandwidth: float | None = None, burst: int = 4096, quantum: int = 64 * 1024,
                 backlog: int | None = None):
        if bandwidth is not None and bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        self.bandwidth = bandwidth
        self.burst = burst
        self.quantum = quantum
        self.backlog = 4 * quantum if backlog is None else backlog
        self._start: float | None = None
        self._sent = 0

    def allowance(self, now: float, pending: int) -> int:
        if self.bandwidth is None:
            return pending
        if self._start is None:
            self._start = now
            self._sent = 0
        credit = self.burst + (now - self._start) * self.bandwidth - self._sent
        cap = self.burst + self.backlog
        if credit > cap:
            # idle time beyond the backlog is lost for good
            self._start += (credit - cap) / self.bandwidth
            credit = cap
        return max(0, min(int(credit), pending))

    def record(self, nbytes: int, drained: bool) -> None:
        self._sent += nbytes
        if drained:
            self._start = None

    def next_due(self, pending: int) -> float | None:
        if self.bandwidth is None or self._start is None or not pending:
            return None
        target = self._sent + min(pending, self.quantum) - self.burst
        return self._start + target / self.bandwidth


class Link:
    """One end of an ordered byte stream to a peer rank.

    Frames are queued whole under the link lock, so concurrent senders never
    interleave bytes of different frames.  Two lanes feed the stream: bulk
    RDV_DATA fragments, and everything else.  At each frame boundary the
    control lane goes first, so a clear-to-send never waits behind megabytes
    of data heading the other way.  Each lane is FIFO.
    """

    def __init__(self, peer: int, pacer: Pacer | None = None):
        self.peer = peer
        self.pacer = pacer or Pacer()
        self.decoder = FrameDecoder(peer)
        self.closed = False
        self.bytes_sent = 0
        self.bytes_received = 0
        self._control: collections.deque[list] = collections.deque()
        self._bulk: collections.deque[list] = collections.deque()
        # frame being written: [remaining segments, on_sent]
        self._current: list | None = None
        self._pending = 0
        self._lock = threading.Lock()

    # -- sending -----------------------------------------------------------
    def send_frame(self, frame: Frame, on_sent: Callable[[], None] | None = None,
                   eager_threshold: int | None = None) -> None:
        header = frame_header(frame, eager_threshold)
        segments = [memoryview(header)]
        if len(frame.payload):
            segments.append(memoryview(frame.payload).cast("B"))
        lane = self._bulk if frame.kind is FrameKind.RDV_DATA else self._control
        with self._lock:
            if self.closed:
                raise ProtocolError("send on closed link", self.peer)
            lane.append([segments, on_sent])
            self._pending += len(header) + len(frame.payload)

    @property
    def pending_bytes(self) -> int:
        return self._pending

    def _next_frame(self) -> list | None:
        if self._control:
            return self._control.popleft()
        if self._bulk:
            return self._bulk.popleft()
        return None

    def flush(self, now: float | None = None) -> bool:
        """Write as much queued data as pacing and the peer allow."""
        with self._lock:
            if not self.wants_write:
                return False
            now = time.monotonic() if now is None else now
            budget = self.pacer.allowance(now, self._pending)
            written = 0
            done: list[Callable[[], None]] = []
            while budget:
                if self._current is None:
                    self._current = self._next_frame()
                    if self._current is None:
                        break
                segments, on_sent = self._current
                mv = segments[0]
                n = self._write(mv[: min(len(mv), budget)])
                if not n:
                    break
                written += n
                budget -= n
                if n < len(mv):
                    segments[0] = mv[n:]
                    continue
                segments.pop(0)
                if not segments:
                    self._current = None
                    if on_sent is not None:
                        done.append(on_sent)
            self._pending -= written
            self.bytes_sent += written
            self.pacer.record(written, drained=not self.wants_write)
        for cb in done:
            cb()
        return bool(written)

    def next_due(self) -> float | None:
        return self.pacer.next_due(self._pending)

    def _write(self, mv: memoryview) -> int:
        raise NotImplementedError

    # -- receiving ---------------------------------------------------------
    def receive(self) -> list[Frame]:
        raise NotImplementedError

    def fileno(self) -> int | None:
        return None

    @property
    def wants_write(self) -> bool:
        return self._current is not None or bool(self._control) or bool(self._bulk)

    def close(self) -> None:
        self.closed = True


class SocketLink(Link):
    def __init__(self, sock: socket.socket, peer: int, pacer: Pacer | None = None):
        super().__init__(peer, pacer)
        sock.setblocking(False)
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass
        self.sock = sock
        self.eof = False

    def _write(self, mv: memoryview) -> int:
        try:
            return self.sock.send(mv)
        except (BlockingIOError, InterruptedError):
            return 0
        except OSError as exc:
            raise ProtocolError(f"send failed: {exc}", self.peer) from None

    def receive(self) -> list[Frame]:
        frames: list[Frame] = []
        if self.eof:
            return frames
        while True:
            try:
                data = self.sock.recv(RECV_CHUNK)
            except (BlockingIOError, InterruptedError):
                break
            except OSError as exc:
                if self.closed:
                    break
                raise ProtocolError(f"receive failed: {exc}", self.peer) from None
            if not data:
                self.eof = True
                break
            self.bytes_received += len(data)
            frames.extend(self.decoder.feed(data))
            if len(data) < RECV_CHUNK:
                break
        return frames

    def fileno(self) -> int | None:
        return None if self.closed else self.sock.fileno()

    def close(self) -> None:
        if not self.closed:
            super().close()
            try:
                self.sock.close()
            except OSError:
                pass


class ChannelLink(Link):
    """In-process stream; the peer end is another ChannelLink (or itself)."""

    def __init__(self, peer: int, pacer: Pacer | None = None):
        super().__init__(peer, pacer)
        self.remote: ChannelLink = self
        self.waker: Callable[[], None] | None = None
        self._inbox: collections.deque[bytes] = collections.deque()
        self._inbox_lock = threading.Lock()

    @classmethod
    def pair(cls, rank_a: int, rank_b: int, bandwidth: float | None = None) -> tuple["ChannelLink", "ChannelLink"]:
        a = cls(rank_b, Pacer(bandwidth))
        b = cls(rank_a, Pacer(bandwidth))
        a.remote, b.remote = b, a
        return a, b

    @classmethod
    def loopback(cls, rank: int) -> "ChannelLink":
        return cls(rank)

    def _write(self, mv: memoryview) -> int:
        remote = self.remote
        if remote.closed and remote is not self:
            raise ProtocolError("peer closed the channel", self.peer)
        # copy: the sender may reuse its buffer once the bytes are out
        with remote._inbox_lock:
            remote._inbox.append(bytes(mv))
        if remote.waker is not None:
            remote.waker()
        return len(mv)

    def receive(self) -> list[Frame]:
        with self._inbox_lock:
            chunks = list(self._inbox)
            self._inbox.clear()
        frames: list[Frame] = []
        for chunk in chunks:
            self.bytes_received += len(chunk)
            frames.extend(self.decoder.feed(chunk))
        return frames


@dataclass(frozen=True)
class Endpoint:
    """Where a rank can be reached: ``(host, port)`` or ``"inproc://hub/rank"``."""

    rank: int
    address: tuple[str, int] | str


class ChannelHub:
    """A complete mesh of in-process channels for ``size`` ranks."""

    _registry: dict[int, "ChannelHub"] = {}
    _ids = itertools.count(1)
    _registry_lock = threading.Lock()

    def __init__(self, size: int, bandwidth: float | None = None):
        if size < 1:
            raise ValueError("size must be >= 1")
        self.size = size
        self.id = next(self._ids)
        self._links: dict[int, dict[int, ChannelLink]] = {r: {} for r in range(size)}
        for r in range(size):
            self._links[r][r] = ChannelLink.loopback(r)
        for a, b in itertools.combinations(range(size), 2):
            la, lb = ChannelLink.pair(a, b, bandwidth)
            self._links[a][b] = la
            self._links[b][a] = lb
        self._claimed: set[int] = set()
        with self._registry_lock:
            self._registry[self.id] = self

    def endpoints(self) -> list[Endpoint]:
        return [Endpoint(r, f"inproc://{self.id}/{r}") for r in range(self.size)]

    def close(self) -> None:
        """Forget the hub so its channels can be collected."""
        with self._registry_lock:
            self._registry.pop(self.id, None)

    def claim(self, rank: int) -> dict[int, ChannelLink]:
        with self._registry_lock:
            if rank in self._claimed:
                raise StartupError("channel endpoint already in use", rank)
            self._claimed.add(rank)
        return self._links[rank]

    @classmethod
    def lookup(cls, address: str) -> tuple["ChannelHub", int]:
        hub_id, rank = address[len("inproc://"):].split("/")
        with cls._registry_lock:
            hub = cls._registry.get(int(hub_id))
        if hub is None:
            raise StartupError(f"unknown channel hub {hub_id}", int(rank))
        return hub, int(rank)


def parse_endpoints(text: str) -> list[Endpoint]:
    """Parse ``host:port,host:port,...`` (rank = position)."""
    endpoints = []
    for rank, item in enumerate(t for t in text.split(",") if t.strip()):
        item = item.strip()
        if item.startswith("inproc://"):
            endpoints.append(Endpoint(rank, item))
            continue
        host, _, port = item.rpartition(":")
        if not host or not port.isdigit():
            raise StartupError(f"malformed endpoint {item!r}", rank)
        endpoints.append(Endpoint(rank, (host, int(port))))
    return endpoints


def format_endpoints(endpoints: Iterable[Endpoint]) -> str:
    out = []
    for ep in endpoints:
        out.append(ep.address if isinstance(ep.address, str) else f"{ep.address[0]}:{ep.address[1]}")
    return ",".join(out)


_HELLO = struct.Struct("<I")


def _connect(address: tuple[str, int], peer: int, deadline: float) -> socket.socket:
    delay = 0.01
    while True:
        try:
            return socket.create_connection(address, timeout=max(0.1, deadline - time.monotonic()))
        except OSError as exc:
            if time.monotonic() + delay > deadline:
                raise StartupError(f"peer unreachable at {address[0]}:{address[1]} ({exc})", peer) from None
            time.sleep(delay)
            delay = min(delay * 2, 0.5)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise OSError("connection closed during handshake")
        buf += chunk
    return buf


def establish_mesh(
    my_rank: int,
    endpoints: list[Endpoint],
    listener: socket.socket | None = None,
    bandwidth: float | None = None,
    timeout: float = 30.0,
) -> dict[int, Link]:
    """Connect ``my_rank`` to every rank in ``endpoints``.

    Returns one link per rank including a loopback link to itself.  Socket
    meshes are built by having each rank dial all lower ranks and accept
    connections from all higher ones; the dialler announces its rank first.
    """
    size = len(endpoints)
    if sorted(ep.rank for ep in endpoints) != list(range(size)):
        raise StartupError("endpoint ranks must be exactly 0..size-1")
    if not 0 <= my_rank < size:
        raise StartupError(f"rank outside [0, {size})", my_rank)
    by_rank = {ep.rank: ep for ep in endpoints}
    mine = by_rank[my_rank].address

    if isinstance(mine, str):
        hub, rank = ChannelHub.lookup(mine)
        if rank != my_rank:
            raise StartupError("endpoint address names another rank", my_rank)
        return dict(hub.claim(my_rank))

    links: dict[int, Link] = {my_rank: ChannelLink.loopback(my_rank)}
    if size == 1:
        if listener is not None:
            listener.close()
        return links
    deadline = time.monotonic() + timeout
    if listener is None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(mine)
        listener.listen(size)
    try:
        for peer in range(my_rank):
            sock = _connect(by_rank[peer].address, peer, deadline)
            sock.sendall(_HELLO.pack(my_rank))
            links[peer] = SocketLink(sock, peer, Pacer(bandwidth))
        for _ in range(size - my_rank - 1):
            listener.settimeout(max(0.01, deadline - time.monotonic()))
            try:
                conn, _ = listener.accept()
                conn.settimeout(max(0.01, deadline - time.monotonic()))
                (peer,) = _HELLO.unpack(_recv_exact(conn, _HELLO.size))
            except OSError as exc:
                missing = [r for r in range(my_rank + 1, size) if r not in links]
                raise StartupError(f"ranks {missing} never connected ({exc})", missing[0]) from None
            if not my_rank < peer < size or peer in links:
                conn.close()
                raise StartupError(f"unexpected hello from rank {peer}", my_rank)
            links[peer] = SocketLink(conn, peer, Pacer(bandwidth))
    except BaseException:
        for link in links.values():
            link.close()
        raise
    finally:
        listener.close()
    return links
