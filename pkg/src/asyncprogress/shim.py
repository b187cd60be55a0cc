"""Asynchronous progress layered over :mod:`asyncprogress.runtime`.

The shim presents the runtime's interface.  Non-blocking point-to-point calls
still execute in the caller's thread; for payloads above the eager threshold
the resulting request is handed to a progress thread and the application
receives a :class:`ProxyRequest` instead.  The progress thread keeps calling
``test_some`` (or ``wait_any``) on everything it holds, so rendezvous
transfers advance while the application computes.

Executing the point-to-point call itself on the progress thread would be
wrong: a send to self would be waited on before the matching receive is ever
posted.  File I/O has no such hazard and is submitted by the progress thread.
"""

from __future__ import annotations

import collections
import enum
import logging
import os
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from . import fileio
from . import runtime as rt_mod
from .errors import ConfigError, StartupError, UsageError
from .runtime import (
    ANY_SOURCE,
    ANY_TAG,
    Communicator,
    ErrorCode,
    Job,
    Request,
    RequestKind,
    Runtime,
    Status,
    ThreadLevel,
)
from .transport import DEFAULT_EAGER_THRESHOLD

log = logging.getLogger(__name__)


class WaitsetStrategy(enum.Enum):
    TEST_SOME = "test_some"
    WAIT_ANY = "wait_any"


def parse_affinity(spec: str) -> list[int]:
    """``"0_2_4"`` -> ``[0, 2, 4]``; the empty string means no pinning."""
    spec = spec.strip()
    if not spec:
        return []
    cores = []
    for token in spec.split("_"):
        if not token.isdigit():
            raise ConfigError(f"bad core id {token!r} in affinity list {spec!r}")
        cores.append(int(token))
    return cores


def progress_core(affinity: Sequence[int], local_index: int) -> int | None:
    """Core for the progress thread of the ``local_index``-th process on a node."""
    if 0 <= local_index < len(affinity):
        return affinity[local_index]
    return None


def _env_bool(value: str, name: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "on", "true", "yes"):
        return True
    if v in ("0", "off", "false", "no"):
        return False
    raise ConfigError(f"{name} must be 0 or 1, got {value!r}")


@dataclass
class ShimConfig:
    enabled: bool = True
    eager_threshold: int = DEFAULT_EAGER_THRESHOLD
    affinity_list: list[int] = field(default_factory=list)
    poll_backoff: tuple[float, float] = (1e-6, 1e-3)
    waitset_strategy: WaitsetStrategy = WaitsetStrategy.TEST_SOME
    local_index: int | None = None
    # shorter GIL hand-off so the progress thread is not starved by a busy
    # application thread; None leaves the interpreter default alone
    switch_interval: float | None = 0.0005
    # Broken design kept for regression tests only: run point-to-point calls
    # on the progress thread and block on them there.  Deadlocks on self-sends.
    submit_on_progress_thread: bool = False

    def __post_init__(self):
        if self.eager_threshold < 0:
            raise ConfigError("eager_threshold must be >= 0")
        if any(c < 0 for c in self.affinity_list):
            raise ConfigError("affinity entries must be >= 0")
        lo, hi = self.poll_backoff
        if not 0 < lo <= hi:
            raise ConfigError("poll_backoff must satisfy 0 < min <= max")

    @classmethod
    def from_env(cls, environ: Mapping[str, str] | None = None) -> "ShimConfig":
        env = os.environ if environ is None else environ
        strategy = env.get("APR_WAITSET", "test_some").strip().lower()
        try:
            waitset = WaitsetStrategy(strategy)
        except ValueError:
            raise ConfigError(f"APR_WAITSET must be test_some or wait_any, got {strategy!r}") from None
        threshold = env.get("APR_EAGER_THRESHOLD", "")
        local = env.get("APR_LOCAL_INDEX", "")
        return cls(
            enabled=_env_bool(env.get("APR_ASYNC", "1"), "APR_ASYNC"),
            eager_threshold=int(threshold) if threshold else DEFAULT_EAGER_THRESHOLD,
            affinity_list=parse_affinity(env.get("APR_ASYNC_CPU_LIST", "")),
            waitset_strategy=waitset,
            local_index=int(local) if local else None,
        )


class ProxyRequest:
    """Stand-in handle whose status is filled in by the progress thread."""

    def __init__(self, kind: RequestKind, shim: "Shim"):
        self.id = next(Request._ids)
        self.kind = kind
        self.underlying: Request | None = None
        self.completed = False
        self.final_status: Status | None = None
        self.consumed = False
        self.error: BaseException | None = None
        self.shim = shim

    def __repr__(self) -> str:
        under = self.underlying.id if self.underlying is not None else None
        state = "done" if self.completed else "pending"
        return f"<ProxyRequest {self.id} {self.kind.value} {state} underlying={under}>"


class ProgressQueue:
    """Multi-producer, single-consumer hand-off to the progress thread."""

    def __init__(self):
        self._items: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self.enqueued = 0

    def put(self, item) -> None:
        with self._cond:
            self._items.append(item)
            self.enqueued += 1
            self._cond.notify()

    def drain(self) -> list:
        with self._cond:
            items = list(self._items)
            self._items.clear()
        return items

    def wait(self, stop: Callable[[], bool]) -> None:
        with self._cond:
            while not self._items and not stop():
                self._cond.wait()

    def poke(self) -> None:
        with self._cond:
            self._cond.notify_all()

    def __len__(self) -> int:
        return len(self._items)


@dataclass
class _Deferred:
    """A call to run on the progress thread."""

    call: Callable[[], Request]
    proxy: ProxyRequest
    block: bool = False


_switch_lock = threading.Lock()
_switch_users = 0
_switch_saved = 0.005


def _shorten_switch_interval(value: float) -> None:
    # several shims may live in one process (in-process tests); the first
    # one saves the interpreter setting and the last one restores it
    global _switch_users, _switch_saved
    with _switch_lock:
        if _switch_users == 0:
            _switch_saved = sys.getswitchinterval()
        _switch_users += 1
        sys.setswitchinterval(min(value, sys.getswitchinterval()))


def _restore_switch_interval() -> None:
    global _switch_users
    with _switch_lock:
        _switch_users -= 1
        if _switch_users == 0:
            sys.setswitchinterval(_switch_saved)


class Shim:
    """Interposition layer with the runtime's call surface."""

    def __init__(self, runtime: Runtime, config: ShimConfig | None = None):
        self.runtime = runtime
        self.config = config or ShimConfig()
        self.queue = ProgressQueue()
        self.proxies_created = 0
        self.progress_thread_ident: int | None = None
        self.target_core: int | None = None
        self.pinned_core: int | None = None
        self._live: dict[int, ProxyRequest] = {}
        self._cond = threading.Condition()
        self._stop = False
        self._thread: threading.Thread | None = None
        self._error: BaseException | None = None
        self._saved_switch: float | None = None

    def __getattr__(self, name: str) -> Any:
        # rank, size, world, dup, progress, ... come straight from the runtime
        return getattr(self.runtime, name)

    @property
    def enabled(self) -> bool:
        return self.config.enabled

    # -- lifecycle ---------------------------------------------------------
    def start(self) -> None:
        if not self.config.enabled:
            return
        if self._thread is not None:
            raise UsageError("progress thread already running")
        local = self.config.local_index
        if local is None:
            local = self.runtime.local_index
        self.target_core = progress_core(self.config.affinity_list, local)
        if self.config.switch_interval is not None:
            _shorten_switch_interval(self.config.switch_interval)
            self._saved_switch = self.config.switch_interval
        self._stop = False
        self._thread = threading.Thread(target=self._run, name=f"progress-{self.runtime.rank}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        """Join the progress thread; the runtime stays usable."""
        if self._live:
            pending = ", ".join(repr(p) for p in self._live.values())
            raise UsageError(f"unconsumed proxy requests: {pending}")
        if self._thread is None:
            return
        self._stop = True
        self.queue.poke()
        self.runtime.wakeup()
        self._thread.join()
        self._thread = None
        if self._saved_switch is not None:
            _restore_switch_interval()
            self._saved_switch = None

    def finalize(self) -> None:
        # the progress thread must be gone before the runtime shuts down
        self.stop()
        self.runtime.finalize()

    @property
    def thread_alive(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    # -- point to point ----------------------------------------------------
    def isend(self, buffer: Any, dest: int, tag: int = 0, comm: Communicator | None = None):
        nbytes = memoryview(buffer).nbytes
        if not self.config.enabled or nbytes <= self.config.eager_threshold:
            return self.runtime.isend(buffer, dest, tag, comm)
        if self.config.submit_on_progress_thread:
            return self._defer(RequestKind.SEND, lambda: self.runtime.isend(buffer, dest, tag, comm), block=True)
        return self._proxy(self.runtime.isend(buffer, dest, tag, comm))

    def irecv(self, buffer: Any, source: int = ANY_SOURCE, tag: int = ANY_TAG, comm: Communicator | None = None):
        nbytes = memoryview(buffer).nbytes
        if not self.config.enabled or nbytes <= self.config.eager_threshold:
            return self.runtime.irecv(buffer, source, tag, comm)
        if self.config.submit_on_progress_thread:
            return self._defer(RequestKind.RECV, lambda: self.runtime.irecv(buffer, source, tag, comm), block=True)
        return self._proxy(self.runtime.irecv(buffer, source, tag, comm))

    # -- file I/O ----------------------------------------------------------
    def file_iwrite_at(self, handle: fileio.FileHandle, offset: int, buffer: Any):
        if not self.config.enabled:
            return fileio.iwrite_at(handle, offset, buffer)
        return self._defer(RequestKind.FILE_WRITE, lambda: fileio.iwrite_at(handle, offset, buffer))

    def file_iread_at(self, handle: fileio.FileHandle, offset: int, buffer: Any):
        if not self.config.enabled:
            return fileio.iread_at(handle, offset, buffer)
        return self._defer(RequestKind.FILE_READ, lambda: fileio.iread_at(handle, offset, buffer))

    # -- completion --------------------------------------------------------
    def test(self, req) -> Status | None:
        if isinstance(req, ProxyRequest):
            return self.proxy_test(req)
        return self.runtime.test(req)

    def wait(self, req) -> Status:
        if isinstance(req, ProxyRequest):
            return self.proxy_wait(req)
        return self.runtime.wait(req)

    def proxy_test(self, proxy: ProxyRequest) -> Status | None:
        self._check_proxy(proxy)
        if not proxy.completed:
            self._raise_if_failed()
            return None
        return self._consume(proxy)

    def proxy_wait(self, proxy: ProxyRequest) -> Status:
        # never touches the underlying request: the progress thread owns it
        self._check_proxy(proxy)
        with self._cond:
            while not proxy.completed:
                self._raise_if_failed()
                self._cond.wait(0.5)
        return self._consume(proxy)

    def test_some(self, reqs: Sequence) -> list[tuple[int, Status]]:
        done: list[tuple[int, Status]] = []
        plain = [(i, r) for i, r in enumerate(reqs) if not isinstance(r, ProxyRequest)]
        for i, r in enumerate(reqs):
            if isinstance(r, ProxyRequest):
                self._check_proxy(r)
                if r.completed:
                    done.append((i, self._consume(r)))
        if plain:
            for j, status in self.runtime.test_some([r for _, r in plain]):
                done.append((plain[j][0], status))
        if not done:
            self._raise_if_failed()
        done.sort(key=lambda item: item[0])
        return done

    def wait_any(self, reqs: Sequence, timeout: float | None = None) -> tuple[int, Status] | None:
        if not reqs:
            raise UsageError("wait_any needs at least one request")
        deadline = None if timeout is None else time.monotonic() + timeout
        has_plain = any(not isinstance(r, ProxyRequest) for r in reqs)
        while True:
            for i, r in enumerate(reqs):
                if isinstance(r, ProxyRequest):
                    self._check_proxy(r)
                    if r.completed:
                        return i, self._consume(r)
                else:
                    status = self.runtime.test(r)
                    if status is not None:
                        return i, status
            self._raise_if_failed()
            budget = 0.05 if deadline is None else deadline - time.monotonic()
            if budget <= 0:
                return None
            if has_plain:
                self.runtime.block(min(budget, 0.001), [r for r in reqs if not isinstance(r, ProxyRequest)])
            else:
                with self._cond:
                    if not any(r.completed for r in reqs):
                        self._cond.wait(min(budget, 0.05))

    def wait_all(self, reqs: Sequence) -> list[Status]:
        return [self.wait(r) for r in reqs]

    @property
    def live_proxies(self) -> list[ProxyRequest]:
        return list(self._live.values())

    # -- internals ---------------------------------------------------------
    def _proxy(self, underlying: Request) -> ProxyRequest:
        proxy = ProxyRequest(underlying.kind, self)
        proxy.underlying = underlying
        self._register(proxy)
        self.queue.put((underlying, proxy))
        self.runtime.wakeup()
        return proxy

    def _defer(self, kind: RequestKind, call: Callable[[], Request], block: bool = False) -> ProxyRequest:
        proxy = ProxyRequest(kind, self)
        self._register(proxy)
        self.queue.put(_Deferred(call, proxy, block))
        self.runtime.wakeup()
        return proxy

    def _register(self, proxy: ProxyRequest) -> None:
        if self._thread is None:
            raise UsageError("shim progress thread is not running")
        self.proxies_created += 1
        self._live[proxy.id] = proxy

    def _check_proxy(self, proxy: ProxyRequest) -> None:
        if proxy.shim is not self:
            raise UsageError(f"proxy {proxy.id} belongs to another shim")
        if proxy.consumed:
            raise UsageError(f"proxy {proxy.id} was already completed and consumed")

    def _consume(self, proxy: ProxyRequest) -> Status:
        proxy.consumed = True
        self._live.pop(proxy.id, None)
        return proxy.final_status

    def _raise_if_failed(self) -> None:
        if self._error is not None:
            raise RuntimeError("progress thread failed") from self._error

    def _complete(self, proxy: ProxyRequest, status: Status) -> None:
        with self._cond:
            proxy.final_status = status
            proxy.completed = True
            self._cond.notify_all()

    def _pin(self) -> None:
        core = self.target_core
        if core is None:
            return
        try:
            if core not in os.sched_getaffinity(0):
                log.warning("progress thread: core %d not available, leaving it unpinned", core)
                return
            os.sched_setaffinity(0, {core})  # pid 0: the calling thread on Linux
            self.pinned_core = core
        except (AttributeError, OSError) as exc:
            log.warning("progress thread: cannot pin to core %d (%s)", core, exc)

    def _run(self) -> None:
        self.progress_thread_ident = threading.get_ident()
        self._pin()
        try:
            self._loop()
        except BaseException as exc:  # surfaced to waiters
            log.exception("progress thread died")
            self._error = exc
            with self._cond:
                self._cond.notify_all()

    def _loop(self) -> None:
        rt = self.runtime
        lo, hi = self.config.poll_backoff
        backoff = lo
        working: list[tuple[Request, ProxyRequest]] = []
        while True:
            for item in self.queue.drain():
                if isinstance(item, _Deferred):
                    self._submit(item, working)
                else:
                    working.append(item)
            if not working:
                if self._stop:
                    return
                self.queue.wait(lambda: self._stop)
                backoff = lo
                continue
            reqs = [r for r, _ in working]
            if self.config.waitset_strategy is WaitsetStrategy.TEST_SOME:
                done = rt.test_some(reqs)
            else:
                hit = rt.wait_any(reqs, timeout=hi)
                done = [hit] if hit is not None else []
            if done:
                finished = {i for i, _ in done}
                for i, status in done:
                    self._complete(working[i][1], status)
                working = [pair for i, pair in enumerate(working) if i not in finished]
                backoff = lo
            elif self.config.waitset_strategy is WaitsetStrategy.TEST_SOME:
                rt.block(backoff, reqs)
                backoff = min(backoff * 2, hi)

    def _submit(self, item: _Deferred, working: list) -> None:
        try:
            req = item.call()
        except Exception as exc:
            item.proxy.error = exc
            self._complete(item.proxy, Status(-1, -1, 0, ErrorCode.IO))
            return
        item.proxy.underlying = req
        if item.block:
            self._complete(item.proxy, self.runtime.wait(req))
        else:
            working.append((req, item.proxy))


def shim_init(job: Job | None = None, thread_level: ThreadLevel = ThreadLevel.SINGLE,
              config: ShimConfig | None = None, **runtime_kwargs) -> Shim:
    """Initialize the runtime at MULTIPLE and start the progress thread."""
    config = ShimConfig.from_env() if config is None else config
    runtime_kwargs.setdefault("eager_threshold", config.eager_threshold)
    rt = rt_mod.init(job, ThreadLevel.MULTIPLE, **runtime_kwargs)
    if rt.thread_level < ThreadLevel.MULTIPLE:
        rt.finalize()
        raise StartupError("runtime does not grant MULTIPLE; aborting", rt.rank)
    shim = Shim(rt, config)
    shim.start()
    return shim


def init(job: Job | None = None, config: ShimConfig | None = None, **runtime_kwargs) -> Shim:
    """Plain initialization, rerouted through :func:`shim_init`."""
    return shim_init(job, ThreadLevel.SINGLE, config, **runtime_kwargs)
