"""End-to-end acceptance runs, one function per criterion.

Each ``criterion_N()`` returns ``(ok, detail)``.  Under pytest every
criterion becomes one test and a PASS/FAIL line is printed in the summary;
``python3 tests/test_acceptance.py [N ...]`` runs them without pytest.
"""

from __future__ import annotations

import csv
import io
import random
import statistics
import subprocess
import sys
import tempfile
import textwrap
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402
from asyncprogress.bench import spmv  # noqa: E402
from asyncprogress.bench.common import Mode, broadcast, comm_for_mode  # noqa: E402
from asyncprogress.bench.io_overlap import expected_file  # noqa: E402
from asyncprogress.bench.overlap import latency_samples, run_pingpong  # noqa: E402
from asyncprogress.local import run_processes, run_ranks  # noqa: E402
from asyncprogress.shim import Shim, ShimConfig  # noqa: E402

MiB = 1024 * 1024
LINK_RATE = 100e6  # bytes/s for the overlap runs: t_c(10 MiB) ~ 0.1 s
EAGER = 256 * 1024


def cli(*argv: str, timeout: float = 600) -> tuple[list[dict], float]:
    """Run a launcher job; return its CSV rows and wall time."""
    t0 = time.monotonic()
    proc = subprocess.run([sys.executable, "-m", "asyncprogress", *argv], capture_output=True, text=True,
                          timeout=timeout)
    elapsed = time.monotonic() - t0
    if proc.returncode != 0:
        raise RuntimeError(f"exit {proc.returncode}: {proc.stderr[-2000:]}")
    return list(csv.DictReader(io.StringIO(proc.stdout))), elapsed


def medians_by(rows, key, value):
    groups = defaultdict(list)
    for r in rows:
        groups[float(r[key])].append(float(r[value]))
    return {k: statistics.median(v) for k, v in sorted(groups.items())}


def overlap_rows(mode: str, factors: str):
    return cli("--ranks", "2", "--link-bandwidth", str(LINK_RATE), "--async", mode, "--reps", "20",
               "overlap", "--size", str(10 * MiB), "--tw-factors", factors)


# 1 ---------------------------------------------------------------------------------

def criterion_1():
    rows, elapsed = overlap_rows("off", "0,0.25,0.5,1,2,4")
    t_c = float(rows[0]["t_c"])
    med = medians_by(rows, "t_w", "t_t")
    slope, intercept = np.polyfit(list(med), list(med.values()), 1)
    ok = abs(slope - 1) <= 0.1 and abs(intercept - t_c) <= 0.2 * t_c and elapsed < 60
    return ok, (f"slope={slope:.3f} intercept={intercept:.4f}s t_c(ping-pong)={t_c:.4f}s "
                f"({(intercept / t_c - 1) * 100:+.1f}%) runtime={elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------------

def criterion_2():
    rows, elapsed = overlap_rows("on", "0.25,0.5,1,2,4")
    t_c = float(rows[0]["t_c"])
    worst, parts = 0.0, []
    for t_w, t_t in medians_by(rows, "t_w", "t_t").items():
        ideal = max(t_c, t_w)
        err = abs(t_t - ideal) / ideal
        worst = max(worst, err)
        parts.append(f"{t_w / t_c:.2g}:{err * 100:.1f}%")
    ok = worst <= 0.15 and elapsed < 60
    return ok, f"t_c={t_c:.4f}s deviation by t_w/t_c {' '.join(parts)} runtime={elapsed:.1f}s"


# 3 ---------------------------------------------------------------------------------

def _litmus(rt):
    V = 8 * MiB
    pp = run_pingpong(rt, [V // 4, V // 2, V], reps=5)
    t_c = float(broadcast(rt, [pp.model.t_c(V) if rt.rank == 0 else 0.0])[0])
    data = np.ones(V, np.uint8)
    waits = []
    with comm_for_mode(rt, Mode.SHIM_ON, ShimConfig()) as comm:
        for _ in range(20):
            if rt.rank == 0:
                req = comm.isend(data, 1, 5)
                time.sleep(2 * t_c)
                t0 = time.perf_counter()
                comm.wait(req)
                waits.append(time.perf_counter() - t0)
            else:
                comm.wait(comm.irecv(data, 0, 5))
    return t_c, waits


def criterion_3():
    t_c, waits = run_processes(2, _litmus, bandwidth=LINK_RATE)[0]
    med = statistics.median(waits)
    return med <= 0.1 * t_c, f"median wait {med * 1e3:.2f} ms = {med / t_c * 100:.1f}% of t_c={t_c:.4f}s"


# 4 ---------------------------------------------------------------------------------

def _latency(rt):
    out = {}
    for mode in (Mode.SHIM_OFF, Mode.SHIM_ON):
        rtts, enqueued = latency_samples(rt, 1024, 10_000, mode, ShimConfig(eager_threshold=EAGER))
        out[mode] = (statistics.median(rtts) if rtts else None, enqueued)
    return out


def criterion_4():
    res = run_processes(2, _latency, eager_threshold=EAGER)[0]
    (off, _), (on, enqueued) = res[Mode.SHIM_OFF], res[Mode.SHIM_ON]
    ok = enqueued == 0 and on <= 1.3 * off
    return ok, f"enqueued={enqueued} median RTT off={off * 1e6:.0f}us on={on * 1e6:.0f}us ratio={on / off:.2f}"


# 5 ---------------------------------------------------------------------------------

HANG = textwrap.dedent(
    """
    from asyncprogress.runtime import Job
    from asyncprogress.shim import ShimConfig, shim_init
    from asyncprogress.transport import ChannelHub
    shim = shim_init(Job.inproc(ChannelHub(1), 0),
                     config=ShimConfig(eager_threshold=1024, submit_on_progress_thread=True))
    reqs = [shim.isend(bytes(1 << 20), 0, 0), shim.irecv(bytearray(1 << 20), 0, 0)]
    shim.wait_all(reqs)
    """
)


def criterion_5():
    code = textwrap.dedent(
        """
        import numpy as np
        from asyncprogress.runtime import Job
        from asyncprogress.shim import ShimConfig, shim_init
        from asyncprogress.transport import ChannelHub
        shim = shim_init(Job.inproc(ChannelHub(1), 0), config=ShimConfig(eager_threshold=1024))
        out, back = np.arange(1 << 18, dtype=np.float64), np.zeros(1 << 18)
        shim.wait_all([shim.isend(out, 0, 0), shim.irecv(back, 0, 0)])
        assert (back == out).all() and shim.queue.enqueued == 2
        shim.finalize()
        """
    )
    t0 = time.monotonic()
    try:
        good = subprocess.run([sys.executable, "-c", code], timeout=5, capture_output=True).returncode == 0
    except subprocess.TimeoutExpired:
        good = False
    took = time.monotonic() - t0
    try:
        subprocess.run([sys.executable, "-c", HANG], timeout=5, capture_output=True)
        hangs = False
    except subprocess.TimeoutExpired:
        hangs = True
    return good and hangs, f"self-send completed={good} in {took:.2f}s; progress-thread submission hangs={hangs}"


# 6 ---------------------------------------------------------------------------------

def criterion_6():
    mismatches, receives = 0, 0
    for seed in range(1000):
        rng = random.Random(seed)
        size = 2 + seed % 3
        sched = oracles.random_schedule(rng, size, rng.randint(1, 24), threshold=64)
        results = run_ranks(size, lambda rt: oracles.execute_schedule(rt, sched), eager_threshold=64, trace=True)
        for trace, received in results:
            got = oracles.runtime_pairings(trace)
            receives += len(got)
            if got != oracles.reference_pairings(trace):
                mismatches += 1
            for rid, status, (src, tag, index) in received:
                if (status.source, status.tag) != (src, tag) or got.get(rid) != (src, index):
                    mismatches += 1
    return mismatches == 0, f"1000 schedules, {receives} receives, {mismatches} mismatches"


# 7 ---------------------------------------------------------------------------------

def criterion_7():
    matrices = {
        "random n=2000": spmv.random_matrix(2000, 12, seed=7),
        "banded n=10000": spmv.banded_matrix(10_000, 400, 16, seed=7),
    }
    worst, runs = 0.0, 0
    for label, m in matrices.items():
        ref = spmv.serial_reference(m, 3)
        for size in range(1, 9):
            for mode in spmv.SpmvMode:
                y = run_ranks(size, lambda rt: spmv.run_spmvm(rt, m, 2, mode, iterations=1, warmup=0,
                                                              seed=3).y)[0]
                worst = max(worst, spmv.relative_error(y, ref))
                runs += 1
    return worst <= 1e-12, f"{runs} runs (2 matrices x 1..8 ranks x 3 modes), worst relative error {worst:.2e}"


# 8 ---------------------------------------------------------------------------------

def criterion_8():
    rows, elapsed = cli("--ranks", "2", "--reps", "10", "--seed", "1", "spmvm", "--rows", "200000",
                        "--half-bandwidth", "60000", "--nnz-per-row", "16", "--threads", "2",
                        "--comm-ratio", "1.0", "--modes", "vector,vector_shim,task")
    t = {r["mode"]: float(r["t_multiply"]) for r in rows}
    err = max(float(r["rel_error"]) for r in rows)
    ok = t["vector_shim"] < 0.9 * t["vector"] and t["task"] < t["vector"] and err <= 1e-12
    return ok, (f"t/multiply vector={t['vector'] * 1e3:.1f}ms vector_shim={t['vector_shim'] * 1e3:.1f}ms "
                f"({t['vector_shim'] / t['vector']:.2f}x) task={t['task'] * 1e3:.1f}ms "
                f"({t['task'] / t['vector']:.2f}x) rel_error<={err:.1e}")


# 9 ---------------------------------------------------------------------------------

GHOST_RATE = 5e6  # t_c(1 MiB) ~ 0.21 s


def criterion_9():
    visible = {}
    t_w = {}
    for ranks in (2, 4, 8):
        rows, _ = cli("--ranks", str(ranks), "--link-bandwidth", str(GHOST_RATE), "--reps", "5", "ghostcell",
                      "--halo", str(MiB), "--base-work", "2.0")
        for mode in ("SHIM_OFF", "SHIM_ON"):
            mine = [r for r in rows if r["mode"] == mode]
            visible[mode, ranks] = statistics.mean(float(r["t_visible_comm"]) for r in mine)
            t_w[ranks] = min(float(r["t_w"]) for r in mine)
    off = [visible["SHIM_OFF", r] for r in (2, 4, 8)]
    spread = (max(off) - min(off)) / statistics.mean(off)
    cv = statistics.pstdev(off) / statistics.mean(off)
    t_c = MiB / GHOST_RATE
    ratios = [visible["SHIM_ON", r] / visible["SHIM_OFF", r] for r in (2, 4, 8)]
    ok = spread <= 0.15 and all(x <= 0.3 for x in ratios) and all(t_w[r] > t_c for r in (2, 4, 8))
    return ok, ("OFF visible " + "/".join(f"{v * 1e3:.0f}" for v in off) + f" ms (spread {spread * 100:.1f}%, "
                f"CV {cv * 100:.1f}%); ON/OFF " + "/".join(f"{x:.3f}" for x in ratios)
                + f"; min t_w {min(t_w.values()):.3f}s > t_c {t_c:.3f}s")


# 10 --------------------------------------------------------------------------------

def criterion_10():
    volume, rate = 64 * MiB, 64 * MiB
    t_io = volume / rate
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "io.dat"
        rows, _ = cli("--ranks", "2", "--reps", "3", "io-overlap", "--volume", str(volume), "--throttle",
                      str(rate), "--tw-factors", "0,0.5,1,2", "--path", str(path))
        identical = path.read_bytes() == expected_file(2, volume, seed=0)
    worst = 0.0
    for mode, model in (("SHIM_OFF", lambda w: t_io + w), ("SHIM_ON", lambda w: max(t_io, w))):
        for rank in ("0", "1"):
            sel = [r for r in rows if r["mode"] == mode and r["rank"] == rank]
            for w, t in medians_by(sel, "t_w", "t_t").items():
                err = abs(t - model(w)) / model(w)
                worst = max(worst, err)
    return worst <= 0.15 and identical, f"worst deviation {worst * 100:.1f}% over both modes and ranks; file identical={identical}"


# 11 --------------------------------------------------------------------------------

def criterion_11():
    differing = 0
    for seed in range(200):
        rng = random.Random(10_000 + seed)
        size = rng.choice([1, 2, 3, 4])
        ops, completion = oracles.mixed_workload(rng, size, threshold=256, n_messages=rng.randint(1, 16))

        def shimmed(rt):
            shim = Shim(rt, ShimConfig(eager_threshold=256))
            shim.start()
            try:
                return oracles.run_workload(shim, ops, completion)
            finally:
                shim.stop()

        off = run_ranks(size, lambda rt: oracles.run_workload(rt, ops, completion), eager_threshold=256)
        on = run_ranks(size, shimmed, eager_threshold=256)
        differing += off != on
    return differing == 0, f"200 workloads, {differing} with differing Status streams"


CRITERIA = {n: globals()[f"criterion_{n}"] for n in range(1, 12)}


@pytest.mark.slow
@pytest.mark.parametrize("n", list(CRITERIA))
def test_criterion(n, acceptance_report):
    ok, detail = CRITERIA[n]()
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    acceptance_report.append(line)
    print(line)
    assert ok, line


if __name__ == "__main__":
    picked = [int(a) for a in sys.argv[1:]] or list(CRITERIA)
    failed = 0
    for n in picked:
        ok, detail = CRITERIA[n]()
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", flush=True)
    sys.exit(1 if failed else 0)
