import random
import threading
import time

import numpy as np
import pytest

from asyncprogress import runtime as rtm
from asyncprogress.errors import ProtocolError, UsageError
from asyncprogress.local import RankFailed, run_ranks
from asyncprogress.runtime import (
    ANY_SOURCE,
    ANY_TAG,
    ErrorCode,
    Job,
    Request,
    RequestKind,
    RequestState,
    Status,
    ThreadLevel,
    match_incoming,
)
from asyncprogress.transport import ChannelHub, MessageEnvelope

import oracles


def solo(**kw):
    hub = ChannelHub(1)
    return rtm.init(Job.inproc(hub, 0), **kw)


def test_self_send_eager_and_rendezvous():
    rt = solo(eager_threshold=64)
    small, big = b"hello", np.arange(10_000, dtype=np.int32)
    out_small, out_big = bytearray(5), np.zeros_like(big)
    reqs = [rt.isend(small, 0, 1), rt.isend(big, 0, 2), rt.irecv(out_big, 0, 2), rt.irecv(out_small, 0, 1)]
    statuses = rt.wait_all(reqs)
    assert bytes(out_small) == small and np.array_equal(out_big, big)
    assert statuses[2] == Status(0, 2, big.nbytes, ErrorCode.OK)
    assert statuses[0].source == 0  # a send's status names the sender
    rt.finalize()


def test_thread_level_always_multiple():
    rt = solo(thread_level=ThreadLevel.SINGLE)
    assert rt.thread_level is ThreadLevel.MULTIPLE
    assert rt.requested_thread_level is ThreadLevel.SINGLE
    rt.finalize()


def test_double_init_and_reinit():
    hub = ChannelHub(1)
    job = Job.inproc(hub, 0)
    rt = rtm.init(job)
    with pytest.raises(UsageError):
        rtm.init(job)
    rt.finalize()
    with pytest.raises(UsageError):
        rt.isend(b"", 0)
    with pytest.raises(UsageError):
        rt.finalize()


def test_finalize_with_outstanding_request():
    rt = solo()
    req = rt.irecv(bytearray(4), 0, 9)
    with pytest.raises(UsageError, match="outstanding"):
        rt.finalize()
    rt.wait(rt.isend(b"abcd", 0, 9))
    rt.wait(req)
    rt.finalize()


@pytest.mark.parametrize("nbytes", [8, 5000])
def test_truncation(nbytes):
    rt = solo(eager_threshold=1024)
    data = bytes(range(256)) * (nbytes // 256 + 1)
    data = data[:nbytes]
    buf = bytearray(4)
    r = rt.irecv(buf, 0, 0)
    rt.wait(rt.isend(data, 0, 0))
    status = rt.wait(r)
    assert status == Status(0, 0, 4, ErrorCode.TRUNCATED)
    assert r.state is RequestState.ERRORED
    assert bytes(buf) == data[:4]
    rt.finalize()


def test_request_reuse_is_an_error():
    rt = solo()
    req = rt.isend(b"x", 0, 0)
    rt.wait(req)
    with pytest.raises(UsageError, match="consumed"):
        rt.wait(req)
    rt.wait(rt.irecv(bytearray(1), 0, 0))
    rt.finalize()


def test_request_state_is_monotone():
    req = Request(RequestKind.SEND, MessageEnvelope(0, 0, 0, 0), b"")
    req.advance(RequestState.TRANSFERRING)
    with pytest.raises(ValueError):
        req.advance(RequestState.MATCHED)
    req.finish(Status(0, 0, 0))
    with pytest.raises(UsageError):
        req.finish(Status(0, 0, 0))


@pytest.mark.parametrize("bad", [dict(dest=5), dict(tag=-3)])
def test_isend_argument_checks(bad):
    rt = solo()
    args = dict(dest=0, tag=0)
    args.update(bad)
    with pytest.raises(UsageError):
        rt.isend(b"x", **args)
    with pytest.raises(UsageError):
        rt.irecv(b"read-only", 0, 0)
    rt.finalize()


def test_match_incoming_fifo():
    class R:
        def __init__(self, src, tag):
            self.envelope = MessageEnvelope(0, tag, src, 0)

    posted = [R(ANY_SOURCE, 5), R(1, ANY_TAG), R(1, 5)]
    unexpected = []
    env = MessageEnvelope(0, 5, 1, 0)
    assert match_incoming(env, posted, unexpected) is not None
    assert len(posted) == 2 and posted[0].envelope.tag == ANY_TAG
    other = MessageEnvelope(1, 5, 1, 0)  # another communicator never matches
    assert match_incoming(other, posted, unexpected) is None
    assert unexpected[0].envelope == other


def test_non_overtaking_two_ranks():
    n = 50

    def body(rt):
        if rt.rank == 0:
            rt.wait_all([rt.isend(np.full(1 if i % 3 else 4000, i, np.int32), 1, 7) for i in range(n)])
            return None
        got = []
        for _ in range(n):
            buf = np.zeros(4000, np.int32)
            rt.wait(rt.irecv(buf, ANY_SOURCE, ANY_TAG))
            got.append(int(buf[0]))
        return got

    assert run_ranks(2, body, eager_threshold=1024)[1] == list(range(n))


def test_communicators_are_isolated():
    def body(rt):
        c = rt.dup()
        if rt.rank == 0:
            rt.wait(rt.isend(b"world", 1, 0))
            rt.wait(rt.isend(b"dup!!", 1, 0, comm=c))
            return None
        a, b = bytearray(5), bytearray(5)
        rb = rt.irecv(b, 0, 0, comm=c)
        ra = rt.irecv(a, 0, 0)
        rt.wait_all([ra, rb])
        return bytes(a), bytes(b)

    assert run_ranks(2, body)[1] == (b"world", b"dup!!")


def test_unexpected_cap_is_a_protocol_error():
    def body(rt):
        if rt.rank == 0:
            rt.wait_all([rt.isend(bytes(100), 1, 0) for _ in range(5)])
            return None
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            rt.progress()

    with pytest.raises(RankFailed) as info:
        run_ranks(2, body, unexpected_cap=250, finalize=False, timeout=10)
    assert isinstance(info.value.exc, ProtocolError)
    assert info.value.exc.rank == 0


def test_test_some_and_wait_any():
    rt = solo()
    bufs = [bytearray(1) for _ in range(3)]
    recvs = [rt.irecv(b, 0, t) for t, b in enumerate(bufs)]
    assert rt.test_some(recvs) == []
    assert rt.wait_any(recvs, timeout=0.01) is None
    rt.wait(rt.isend(b"a", 0, 1))
    idx, status = rt.wait_any(recvs)
    assert idx == 1 and status.tag == 1
    rt.wait_all([rt.isend(b"b", 0, 0), rt.isend(b"c", 0, 2)])
    done = rt.test_some([recvs[0], recvs[2]])
    assert [i for i, _ in done] == [0, 1]
    rt.finalize()


def test_many_threads_share_one_runtime():
    n_threads, per_thread = 4, 25

    def body(rt):
        peer = 1 - rt.rank
        errors = []

        def worker(t):
            try:
                for i in range(per_thread):
                    out = np.full(300 if i % 2 else 3, t * 1000 + i, np.int64)
                    back = np.zeros_like(out)
                    r = rt.irecv(back, peer, t)
                    rt.wait(rt.isend(out, peer, t))
                    rt.wait(r)
                    assert back[0] == t * 1000 + i
            except BaseException as exc:
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(t,)) for t in range(n_threads)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return errors

    assert run_ranks(2, body, eager_threshold=1024) == [[], []]


def test_concurrent_wait_on_one_request_is_rejected():
    rt = solo()
    req = rt.irecv(bytearray(1), 0, 0)
    started = threading.Event()

    def waiter():
        started.set()
        rt.wait(req)

    t = threading.Thread(target=waiter)
    t.start()
    started.wait()
    time.sleep(0.05)
    with pytest.raises(UsageError, match="another thread"):
        rt.test(req)
    rt.wait(rt.isend(b"z", 0, 0))
    t.join(5)
    rt.finalize()


def test_job_from_env(clean_env):
    clean_env.setenv("APR_RANK", "1")
    clean_env.setenv("APR_SIZE", "2")
    clean_env.setenv("APR_ENDPOINTS", "127.0.0.1:5000,127.0.0.1:5001")
    clean_env.setenv("APR_LINK_BANDWIDTH", "1e6")
    job = Job.from_env()
    assert (job.rank, job.size, job.link_bandwidth, job.local_index) == (1, 2, 1e6, 1)
    clean_env.delenv("APR_ENDPOINTS")
    with pytest.raises(rtm.StartupError):
        Job.from_env()


@pytest.mark.parametrize("seed", range(12))
def test_matching_against_reference(seed):
    rng = random.Random(seed)
    size = rng.choice([2, 3, 4])
    sched = oracles.random_schedule(rng, size, rng.randint(1, 20), threshold=64)
    results = run_ranks(size, lambda rt: oracles.execute_schedule(rt, sched), eager_threshold=64, trace=True)
    for trace, received in results:
        got = oracles.runtime_pairings(trace)
        assert got == oracles.reference_pairings(trace)
        for rid, status, (src, tag, index) in received:
            assert (status.source, status.tag) == (src, tag)
            assert got[rid] == (src, index)
