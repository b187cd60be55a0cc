"""Run a whole job inside one process, one thread per rank.

Handy for tests and quick experiments; ranks talk over in-process channels
instead of sockets.
"""

from __future__ import annotations

import threading
from typing import Any, Callable

from . import runtime
from .transport import ChannelHub


class RankFailed(RuntimeError):
    def __init__(self, rank: int, exc: BaseException):
        super().__init__(f"rank {rank} failed: {exc!r}")
        self.rank = rank
        self.exc = exc


def run_ranks(size: int, fn: Callable[[runtime.Runtime], Any], *, bandwidth: float | None = None,
              timeout: float = 120.0, finalize: bool = True, **init_kwargs) -> list[Any]:
    """Call ``fn(rt)`` on ``size`` ranks concurrently and return the results by rank.

    The first exception is re-raised as :class:`RankFailed`; a job that does
    not finish within ``timeout`` raises ``TimeoutError`` (its threads are
    daemons and are left behind).
    """
    hub = ChannelHub(size, bandwidth)
    results: list[Any] = [None] * size
    errors: list[tuple[int, BaseException]] = []

    def body(rank: int) -> None:
        try:
            rt = runtime.init(runtime.Job.inproc(hub, rank), runtime.ThreadLevel.MULTIPLE, **init_kwargs)
            results[rank] = fn(rt)
            if finalize:
                rt.finalize(timeout=timeout)
        except BaseException as exc:
            errors.append((rank, exc))

    threads = [threading.Thread(target=body, args=(r,), daemon=True, name=f"rank-{r}") for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    hub.close()
    if errors:
        rank, exc = errors[0]
        raise RankFailed(rank, exc) from exc
    if any(t.is_alive() for t in threads):
        raise TimeoutError(f"job of {size} ranks did not finish within {timeout} s")
    return results


def _process_main(rank: int, size: int, endpoints, listeners, fn, conn, bandwidth, init_kwargs) -> None:
    import pickle
    import traceback

    for r, s in enumerate(listeners):
        if r != rank:
            s.close()
    try:
        job = runtime.Job(rank, size, endpoints, listeners[rank], bandwidth, rank)
        rt = runtime.init(job, runtime.ThreadLevel.MULTIPLE, **init_kwargs)
        result = fn(rt)
        rt.finalize()
        conn.send_bytes(pickle.dumps(("ok", result)))
    except BaseException as exc:
        conn.send_bytes(pickle.dumps(("err", f"{exc!r}\n{traceback.format_exc()}")))
    finally:
        conn.close()


def run_processes(size: int, fn: Callable[[runtime.Runtime], Any], *, bandwidth: float | None = None,
                  timeout: float = 300.0, **init_kwargs) -> list[Any]:
    """Like :func:`run_ranks` but one forked process per rank, talking over TCP.

    ``fn`` and its return value must be picklable; every child is killed if
    the job overruns ``timeout``.
    """
    import multiprocessing
    import pickle
    import socket
    import time

    from .transport import Endpoint

    ctx = multiprocessing.get_context("fork")
    listeners = []
    for _ in range(size):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.bind(("127.0.0.1", 0))
        s.listen(size)
        listeners.append(s)
    endpoints = [Endpoint(r, s.getsockname()) for r, s in enumerate(listeners)]
    pipes, procs = [], []
    try:
        for r in range(size):
            recv_end, send_end = ctx.Pipe(duplex=False)
            p = ctx.Process(target=_process_main, daemon=True,
                            args=(r, size, endpoints, listeners, fn, send_end, bandwidth, init_kwargs))
            p.start()
            send_end.close()
            pipes.append(recv_end)
            procs.append(p)
    finally:
        for s in listeners:
            s.close()
    deadline = time.monotonic() + timeout
    results: list[Any] = [None] * size
    try:
        for r, conn in enumerate(pipes):
            if not conn.poll(max(0.0, deadline - time.monotonic())):
                raise TimeoutError(f"rank {r} did not finish within {timeout} s")
            try:
                tag, value = pickle.loads(conn.recv_bytes())
            except EOFError:
                raise RankFailed(r, RuntimeError(f"rank {r} exited with code {procs[r].exitcode}")) from None
            if tag == "err":
                raise RankFailed(r, RuntimeError(value))
            results[r] = value
    finally:
        for p in procs:
            p.join(max(0.1, min(5.0, deadline - time.monotonic())))
            if p.is_alive():
                p.kill()
                p.join()
    return results
