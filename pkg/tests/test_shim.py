import logging
import os
import random
import statistics
import subprocess
import sys
import textwrap
import threading
import time

import numpy as np
import pytest

from asyncprogress import fileio
from asyncprogress import runtime as rtm
from asyncprogress.errors import ConfigError, UsageError
from asyncprogress.local import run_ranks
from asyncprogress.runtime import ErrorCode, Job, Request, Status
from asyncprogress.shim import (
    ProxyRequest,
    Shim,
    ShimConfig,
    WaitsetStrategy,
    parse_affinity,
    progress_core,
    shim_init,
)
from asyncprogress.transport import ChannelHub

import oracles


@pytest.mark.parametrize(
    "text, cores",
    [("0_2_4", [0, 2, 4]), ("", []), ("  ", []), ("7", [7])],
)
def test_parse_affinity(text, cores):
    assert parse_affinity(text) == cores


@pytest.mark.parametrize("text", ["0_a_4", "0,2", "-1", "0__1"])
def test_parse_affinity_rejects(text):
    with pytest.raises(ConfigError):
        parse_affinity(text)


def test_bad_token_is_named():
    with pytest.raises(ConfigError, match="'x'"):
        parse_affinity("1_x")


def test_progress_core():
    assert progress_core([3, 5], 1) == 5
    assert progress_core([3, 5], 2) is None
    assert progress_core([], 0) is None


def test_config_from_env(clean_env):
    clean_env.setenv("APR_ASYNC", "0")
    clean_env.setenv("APR_EAGER_THRESHOLD", "4096")
    clean_env.setenv("APR_ASYNC_CPU_LIST", "0_2")
    clean_env.setenv("APR_WAITSET", "wait_any")
    cfg = ShimConfig.from_env()
    assert (cfg.enabled, cfg.eager_threshold, cfg.affinity_list, cfg.waitset_strategy) == (
        False, 4096, [0, 2], WaitsetStrategy.WAIT_ANY)
    clean_env.setenv("APR_WAITSET", "spin")
    with pytest.raises(ConfigError):
        ShimConfig.from_env()


@pytest.mark.parametrize("kw", [dict(eager_threshold=-1), dict(poll_backoff=(0.0, 1.0)),
                                dict(poll_backoff=(1e-3, 1e-6)), dict(affinity_list=[-2])])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ShimConfig(**kw)


def solo_shim(**cfg) -> Shim:
    hub = ChannelHub(1)
    cfg.setdefault("eager_threshold", 1024)
    return shim_init(Job.inproc(hub, 0), config=ShimConfig(**cfg))


def test_small_messages_bypass_the_queue():
    shim = solo_shim()
    reqs = [shim.isend(bytes(1024), 0, 1), shim.irecv(bytearray(1024), 0, 1)]
    assert all(isinstance(r, Request) for r in reqs)
    shim.wait_all(reqs)
    assert shim.queue.enqueued == 0
    shim.finalize()


def test_large_messages_are_proxied():
    shim = solo_shim()
    out = np.arange(1000, dtype=np.float64)
    back = np.zeros_like(out)
    r = shim.irecv(back, 0, 3)
    s = shim.isend(out, 0, 3)
    assert isinstance(r, ProxyRequest) and isinstance(s, ProxyRequest)
    assert shim.queue.enqueued == 2
    assert shim.wait(r) == Status(0, 3, out.nbytes, ErrorCode.OK)
    assert shim.wait(s).received_bytes == out.nbytes
    assert np.array_equal(back, out)
    with pytest.raises(UsageError):
        shim.wait(r)
    shim.finalize()


def test_p2p_call_runs_in_caller_thread():
    shim = solo_shim()
    r = shim.irecv(bytearray(5000), 0, 0)
    s = shim.isend(bytes(5000), 0, 0)
    assert r.underlying.submitter == threading.get_ident()
    shim.wait_all([r, s])
    shim.finalize()


def test_disabled_shim_is_a_passthrough():
    shim = solo_shim(enabled=False)
    assert not shim.thread_alive
    r = shim.irecv(bytearray(5000), 0, 0)
    s = shim.isend(bytes(5000), 0, 0)
    assert isinstance(r, Request)
    shim.wait_all([s, r])
    shim.finalize()


def test_stop_with_live_proxy_is_an_error():
    shim = solo_shim()
    r = shim.irecv(bytearray(5000), 0, 0)
    with pytest.raises(UsageError, match="unconsumed"):
        shim.stop()
    shim.wait(shim.isend(bytes(5000), 0, 0))
    shim.wait(r)
    shim.finalize()


def test_init_is_rerouted_through_shim_init():
    from asyncprogress import shim as shim_mod

    hub = ChannelHub(1)
    s = shim_mod.init(Job.inproc(hub, 0), ShimConfig())
    assert isinstance(s, Shim) and s.thread_alive
    assert s.runtime.thread_level is rtm.ThreadLevel.MULTIPLE
    s.finalize()


def test_self_send_through_shim_completes():
    shim = solo_shim()
    big = np.ones(1 << 20, np.uint8)
    out = np.zeros_like(big)
    t0 = time.monotonic()
    reqs = [shim.isend(big, 0, 0), shim.irecv(out, 0, 0)]
    shim.wait_all(reqs)
    assert time.monotonic() - t0 < 5
    assert out.all()
    shim.finalize()


def test_mixed_waitset():
    shim = solo_shim()
    reqs = [shim.irecv(bytearray(10), 0, 1), shim.irecv(bytearray(5000), 0, 2)]
    assert shim.test_some(reqs) == []
    assert shim.wait_any(reqs, timeout=0.01) is None
    sends = [shim.isend(bytes(5000), 0, 2), shim.isend(bytes(10), 0, 1)]
    got = {}
    while len(got) < 2:
        for i, st in shim.test_some([r for k, r in enumerate(reqs) if k not in got]):
            live = [k for k in range(2) if k not in got]
            got[live[i]] = st
    assert got[0].received_bytes == 10 and got[1].received_bytes == 5000
    shim.wait_all(sends)
    shim.finalize()


def thread_cpu(ident: int) -> float:
    return time.clock_gettime(time.pthread_getcpuclockid(ident))


def test_idle_progress_thread_sleeps():
    shim = solo_shim()
    ident = shim._thread.ident
    c0, t0 = thread_cpu(ident), time.monotonic()
    time.sleep(0.5)
    share = (thread_cpu(ident) - c0) / (time.monotonic() - t0)
    shim.finalize()
    assert share < 0.05


def test_repeated_init_finalize_leaks_no_threads():
    before = threading.active_count()
    for _ in range(100):
        shim = solo_shim()
        r = shim.irecv(bytearray(2000), 0, 0)
        shim.wait(shim.isend(bytes(2000), 0, 0))
        shim.wait(r)
        shim.finalize()
    assert threading.active_count() == before


def test_switch_interval_restored():
    before = sys.getswitchinterval()
    a, b = solo_shim(), solo_shim()
    assert sys.getswitchinterval() <= 0.0005
    a.finalize()
    assert sys.getswitchinterval() <= 0.0005
    b.finalize()
    assert sys.getswitchinterval() == before


def test_affinity_pins_progress_thread():
    core = sorted(os.sched_getaffinity(0))[0]
    shim = solo_shim(affinity_list=[core], local_index=0)
    deadline = time.monotonic() + 2
    while shim.pinned_core is None and time.monotonic() < deadline:
        time.sleep(0.01)
    assert shim.target_core == core and shim.pinned_core == core
    # pinning applies to the progress thread only
    assert core in os.sched_getaffinity(0)
    shim.finalize()


def test_unavailable_core_is_a_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="asyncprogress.shim"):
        shim = solo_shim(affinity_list=[4096], local_index=0)
        time.sleep(0.1)
        assert shim.pinned_core is None
        shim.finalize()
    assert "not available" in caplog.text


def test_file_io_is_deferred(tmp_path):
    shim = solo_shim()
    path = tmp_path / "f.bin"
    data = np.random.default_rng(0).integers(0, 256, 3 << 20, dtype=np.uint8)
    with fileio.file_open(path, "w", chunk_size=1 << 20) as fh:
        req = shim.file_iwrite_at(fh, 0, data)
        assert isinstance(req, ProxyRequest)
        st = shim.wait(req)
    assert st == Status(-1, -1, data.nbytes, ErrorCode.OK)
    assert path.read_bytes() == data.tobytes()
    with fileio.file_open(path, "r") as fh:
        bad = shim.file_iwrite_at(fh, 0, data)  # read-only handle
        assert shim.wait(bad).error is ErrorCode.IO
        assert isinstance(bad.error, UsageError)
    shim.finalize()


def transparency(seed: int, strategy=WaitsetStrategy.TEST_SOME):
    rng = random.Random(seed)
    size = rng.choice([1, 2, 3])
    threshold = 256
    ops, completion = oracles.mixed_workload(rng, size, threshold)

    def plain(rt):
        return oracles.run_workload(rt, ops, completion)

    def shimmed(rt):
        shim = Shim(rt, ShimConfig(eager_threshold=threshold, waitset_strategy=strategy))
        shim.start()
        try:
            return oracles.run_workload(shim, ops, completion)
        finally:
            shim.stop()

    off = run_ranks(size, plain, eager_threshold=threshold)
    on = run_ranks(size, shimmed, eager_threshold=threshold)
    return off, on


@pytest.mark.parametrize("seed", range(10))
def test_transparency(seed):
    off, on = transparency(seed)
    assert off == on


@pytest.mark.parametrize("seed", range(5))
def test_waitset_strategies_agree(seed):
    _, a = transparency(seed, WaitsetStrategy.TEST_SOME)
    _, b = transparency(seed, WaitsetStrategy.WAIT_ANY)
    assert a == b


def test_progress_thread_advances_transfer():
    # a 2-rank litmus on in-process channels: the wait after the sleep is short
    V, bw = 1 << 20, 20e6
    t_c = V / bw

    def body(rt):
        buf = np.ones(V, np.uint8)
        shim = Shim(rt, ShimConfig())
        shim.start()
        waits = []
        for _ in range(3):
            if rt.rank == 0:
                req = shim.isend(buf, 1, 0)
                time.sleep(2 * t_c)
                t0 = time.monotonic()
                shim.wait(req)
                waits.append(time.monotonic() - t0)
            else:
                shim.wait(shim.irecv(buf, 0, 0))
        shim.stop()
        return waits

    waits = run_ranks(2, body, bandwidth=bw)[0]
    assert statistics.median(waits) < 0.1 * t_c


HANG_SCRIPT = textwrap.dedent(
    """
    from asyncprogress.shim import ShimConfig, shim_init
    from asyncprogress.runtime import Job
    from asyncprogress.transport import ChannelHub
    shim = shim_init(Job.inproc(ChannelHub(1), 0),
                     config=ShimConfig(eager_threshold=16, submit_on_progress_thread=True))
    s = shim.isend(bytes(1000), 0, 0)
    r = shim.irecv(bytearray(1000), 0, 0)
    shim.wait_all([s, r])
    print("completed")
    """
)


def test_submitting_from_progress_thread_hangs():
    """Known-bad design: the progress thread blocks on the send before the receive exists."""
    with pytest.raises(subprocess.TimeoutExpired):
        subprocess.run([sys.executable, "-c", HANG_SCRIPT], timeout=3, capture_output=True)
