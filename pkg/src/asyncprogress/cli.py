"""Command-line front end.

``python -m asyncprogress [global flags] <benchmark> [flags]`` spawns one
process per rank, hands each a pre-bound listening socket and the endpoint
list, and merges the per-rank CSV fragments by rank.  The children run the
internal ``worker`` subcommand.

Exit codes: 0 success, 1 benchmark failure, 2 usage error, 3 launch failure.
"""

from __future__ import annotations

import argparse
import collections
import csv
import io
import logging
import os
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import runtime
from .errors import AsyncProgressError, ConfigError, StartupError, UsageError
from .bench.overlap import Variant
from .shim import ShimConfig, parse_affinity
from .transport import Endpoint, format_endpoints

log = logging.getLogger("asyncprogress")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_LAUNCH = 3

MiB = 1 << 20


class LaunchError(AsyncProgressError):
    pass


# -- launcher ---------------------------------------------------------------

@dataclass
class JobSpec:
    ranks: int
    argv: list[str]
    env: dict[str, str] = field(default_factory=dict)
    csv_path: str | None = None
    timeout: float = 600.0
    grace: float = 5.0

    def __post_init__(self):
        if self.ranks < 1:
            raise UsageError(f"--ranks must be >= 1, got {self.ranks}")
        if self.csv_path:
            parent = Path(self.csv_path).resolve().parent
            if not parent.is_dir() or not os.access(parent, os.W_OK):
                raise UsageError(f"cannot write CSV to {self.csv_path}")


@dataclass
class LaunchResult:
    returncode: int
    header: list[str]
    rows: list[list[str]]
    failed_rank: int | None = None
    stderr_tail: str = ""

    def csv_text(self) -> str:
        out = io.StringIO()
        if self.header:
            writer = csv.writer(out, lineterminator="\n")
            writer.writerow(self.header)
            writer.writerows(self.rows)
        return out.getvalue()


class _Pump(threading.Thread):
    """Forward a child's output to our stderr, keeping the last lines."""

    def __init__(self, rank: int, stream):
        super().__init__(daemon=True, name=f"pump-{rank}")
        self.rank = rank
        self.stream = stream
        self.tail: collections.deque[str] = collections.deque(maxlen=20)

    def run(self):
        for raw in iter(self.stream.readline, b""):
            line = raw.decode(errors="replace").rstrip("\n")
            self.tail.append(line)
            sys.stderr.write(f"[rank {self.rank}] {line}\n")
        self.stream.close()


def _package_path() -> str:
    return str(Path(__file__).resolve().parent.parent)


def _exit_class(code: int) -> int:
    if code in (EXIT_USAGE, EXIT_LAUNCH):
        return code
    return EXIT_FAILURE


def launch(spec: JobSpec) -> LaunchResult:
    """Run ``spec.argv`` as a ``worker`` on every rank and collect the CSV."""
    listeners: list[socket.socket] = []
    try:
        for _ in range(spec.ranks):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.bind(("127.0.0.1", 0))
            s.listen(spec.ranks)
            listeners.append(s)
    except OSError as exc:
        for s in listeners:
            s.close()
        raise LaunchError(f"cannot allocate ports: {exc}") from None
    endpoints = format_endpoints(Endpoint(r, s.getsockname()) for r, s in enumerate(listeners))

    procs: list[subprocess.Popen] = []
    pumps: list[_Pump] = []
    with tempfile.TemporaryDirectory(prefix="apr-job-") as tmp:
        fragments = [os.path.join(tmp, f"rank{r}.csv") for r in range(spec.ranks)]
        try:
            for r, sock in enumerate(listeners):
                env = dict(os.environ)
                env.update(spec.env)
                env.update(
                    APR_RANK=str(r),
                    APR_SIZE=str(spec.ranks),
                    APR_ENDPOINTS=endpoints,
                    APR_LOCAL_INDEX=str(r),
                    APR_LISTEN_FD=str(sock.fileno()),
                    APR_CSV_FRAGMENT=fragments[r],
                    PYTHONPATH=os.pathsep.join(filter(None, [_package_path(), env.get("PYTHONPATH")])),
                )
                proc = subprocess.Popen(
                    [sys.executable, "-m", "asyncprogress", "worker", *spec.argv],
                    env=env,
                    pass_fds=(sock.fileno(),),
                    stdin=subprocess.DEVNULL,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.STDOUT,
                )
                procs.append(proc)
                pump = _Pump(r, proc.stdout)
                pump.start()
                pumps.append(pump)
        except OSError as exc:
            _kill(procs)
            raise LaunchError(f"cannot spawn rank {len(procs)}: {exc}") from None
        finally:
            for s in listeners:
                s.close()

        failed, timed_out = _wait(procs, spec.timeout, spec.grace)
        for p in pumps:
            p.join(timeout=2.0)
        if timed_out:
            return LaunchResult(EXIT_FAILURE, [], [], None, f"job exceeded {spec.timeout:.0f} s and was killed")
        if failed is not None:
            rank, code = failed
            tail = "\n".join(pumps[rank].tail)
            return LaunchResult(_exit_class(code), [], [], rank, tail)
        header, rows = _merge(fragments)
        return LaunchResult(EXIT_OK, header, rows)


def _kill(procs) -> None:
    for p in procs:
        if p.poll() is None:
            p.kill()
    for p in procs:
        p.wait()


def _wait(procs, timeout: float, grace: float) -> tuple[tuple[int, int] | None, bool]:
    """Wait for all ranks; after the first failure the rest get ``grace`` seconds."""
    deadline = time.monotonic() + timeout
    failed = None
    while True:
        codes = [p.poll() for p in procs]
        if failed is None:
            for r, c in enumerate(codes):
                if c not in (None, 0):
                    failed = (r, c)
                    deadline = min(deadline, time.monotonic() + grace)
                    break
        if all(c is not None for c in codes):
            return failed, False
        if time.monotonic() > deadline:
            _kill(procs)
            return failed, failed is None
        time.sleep(0.02)


def _merge(fragments: list[str]) -> tuple[list[str], list[list[str]]]:
    header: list[str] = []
    rows: list[list[str]] = []
    for path in fragments:
        if not os.path.exists(path):
            continue
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            head = next(reader, None)
            if head is None:
                continue
            if header and head != header:
                raise LaunchError(f"rank fragments disagree on columns: {head} vs {header}")
            header = head
            rows.extend(reader)
    return header, rows


# -- benchmarks (run inside a worker) ----------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected a comma separated list of numbers, got {text!r}") from None


def _shim_config(args) -> ShimConfig:
    config = ShimConfig.from_env()
    config.enabled = True
    return config


def bench_overlap(rt, args) -> list[dict]:
    from .bench.common import Mode, broadcast, parse_modes
    from .bench.overlap import run_overlap, run_pingpong

    modes = parse_modes(args.async_mode)
    V = args.size
    if rt.size != 2:
        raise UsageError(f"overlap needs exactly 2 ranks, got {rt.size}")
    sizes = [int(s) for s in _floats(args.fit_sizes)] if args.fit_sizes else [V // 8, V // 4, V // 2, V]
    pp = run_pingpong(rt, sizes, Mode.SHIM_OFF, reps=args.reps)
    t_c = broadcast(rt, [pp.model.t_c(V) if rt.rank == 0 else 0.0])[0]
    if rt.rank == 0:
        log.info("ping-pong fit: B_N=%.4g B/s t_l=%.3g s -> t_c(%d)=%.4g s", pp.model.B_N, pp.model.t_l, V, t_c)
    sweep = _floats(args.tw) if args.tw else [f * t_c for f in _floats(args.tw_factors)]
    rows = []
    for mode in modes:
        samples = run_overlap(rt, V, sweep, mode, Variant(args.variant), args.reps, _shim_config(args), args.seed)
        rows += [dict(mode=s.mode.value, V=s.V, t_c=f"{t_c:.6g}", t_w=f"{s.t_w:.6g}", t_t=f"{s.t_t:.6g}",
                      rep=s.rep) for s in samples]
    return rows


def bench_pingpong(rt, args) -> list[dict]:
    from .bench.common import parse_modes
    from .bench.overlap import run_pingpong

    sizes = [int(s) for s in _floats(args.sizes)]
    rows = []
    for mode in parse_modes(args.async_mode):
        res = run_pingpong(rt, sizes, mode, reps=args.reps, shim_config=_shim_config(args))
        if rt.rank == 0:
            for V, t, bw in zip(res.sizes, res.t_oneway, res.bandwidth):
                rows.append(dict(mode=mode.value, V=V, t_oneway=f"{t:.6g}", bandwidth=f"{bw:.6g}"))
            log.info("%s fit: B_N=%.4g B/s t_l=%.3g s", mode.value, res.model.B_N, res.model.t_l)
    return rows


def bench_ghostcell(rt, args) -> list[dict]:
    from .bench.common import parse_modes
    from .bench.ghostcell import run_ghostcell

    rows = []
    for mode in parse_modes(args.async_mode):
        r = run_ghostcell(rt, args.halo, args.base_work, mode, iterations=args.reps, ring=args.ring,
                          triad_bytes=args.triad_bytes, shim_config=_shim_config(args))
        if not r.triad_ok:
            raise AsyncProgressError(f"rank {rt.rank}: triad or halo verification failed")
        rows.append(dict(mode=mode.value, ranks=r.ranks, rank=r.rank, halo_bytes=r.halo_bytes,
                         t_w=f"{r.t_w:.6g}", t_visible_comm=f"{r.t_visible_comm:.6g}",
                         t_total=f"{r.t_total:.6g}", iterations=r.iterations))
    return rows


def _load_matrix(args):
    from .bench import spmv

    if args.matrix:
        return spmv.read_matrix_market(args.matrix), f"file:{args.matrix}"
    if args.synthetic == "banded":
        m = spmv.banded_matrix(args.rows, args.half_bandwidth, args.nnz_per_row, args.seed)
        return m, f"banded:n={args.rows};w={args.half_bandwidth};k={args.nnz_per_row};seed={args.seed}"
    m = spmv.random_matrix(args.rows, args.nnz_per_row, args.seed)
    return m, f"random:n={args.rows};k={args.nnz_per_row};seed={args.seed}"


def bench_spmvm(rt, args) -> list[dict]:
    from .bench import spmv

    try:
        modes = [spmv.SpmvMode(m.strip().lower()) for m in args.modes.split(",") if m.strip()]
    except ValueError:
        raise UsageError(f"--modes takes vector, vector_shim and task, got {args.modes!r}") from None
    matrix, label = _load_matrix(args)
    if args.comm_ratio:
        rate = spmv.calibrate_comm(rt, matrix, args.comm_ratio, args.threads, args.seed)
        if rt.rank == 0:
            log.info("link rate set to %.4g B/s for comm/compute ratio %.2f", rate or 0.0, args.comm_ratio)
    ref = spmv.serial_reference(matrix, args.seed) if rt.rank == 0 else None
    rows = []
    for mode in modes:
        r = spmv.run_spmvm(rt, matrix, args.threads, mode, iterations=args.reps, seed=args.seed,
                           shim_config=_shim_config(args))
        if rt.rank == 0:
            rows.append(dict(mode=mode.value, ranks=rt.size, threads=args.threads, n_rows=r.n_rows, nnz=r.nnz,
                             t_multiply=f"{r.t_multiply:.6g}", multiplies_per_s=f"{1.0 / r.t_multiply:.6g}",
                             t_local=f"{r.t_local:.6g}", t_wait=f"{r.t_wait:.6g}",
                             t_nonlocal=f"{r.t_nonlocal:.6g}",
                             rel_error=f"{spmv.relative_error(r.y, ref):.3e}", matrix=label))
    return rows


def bench_io_overlap(rt, args) -> list[dict]:
    from .bench.common import barrier, parse_modes
    from .bench.io_overlap import expected_file, run_io_overlap

    # every rank of one job shares the launcher as parent
    path = args.path or os.path.join(tempfile.gettempdir(), f"apr-io-overlap-{os.getppid()}.dat")
    t_io = args.volume / args.throttle
    sweep = _floats(args.tw) if args.tw else [f * t_io for f in _floats(args.tw_factors)]
    rows = []
    try:
        for mode in parse_modes(args.async_mode):
            samples = run_io_overlap(rt, path, args.volume, sweep, mode, args.reps, args.throttle,
                                     args.chunk, args.seed, _shim_config(args))
            rows += [dict(mode=s.mode.value, rank=rt.rank, V=s.V, t_w=f"{s.t_w:.6g}", t_t=f"{s.t_t:.6g}",
                          rep=s.rep) for s in samples]
        if rt.rank == 0:
            with open(path, "rb") as fh:
                if fh.read() != expected_file(rt.size, args.volume, args.seed):
                    raise AsyncProgressError(f"{path} differs from the expected rank-ordered payloads")
        barrier(rt)
    finally:
        if rt.rank == 0 and not args.keep and not args.path:
            Path(path).unlink(missing_ok=True)
    return rows


BENCHMARKS: dict[str, Callable] = {
    "overlap": bench_overlap,
    "pingpong": bench_pingpong,
    "ghostcell": bench_ghostcell,
    "spmvm": bench_spmvm,
    "io-overlap": bench_io_overlap,
}


def _write_fragment(path: str | None, rows: list[dict]) -> None:
    if not path or not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def run_worker(args) -> int:
    bench = BENCHMARKS[args.command]
    try:
        rt = runtime.init(runtime.Job.from_env(), runtime.ThreadLevel.MULTIPLE)
    except (StartupError, OSError) as exc:
        log.error("startup failed: %s", exc)
        return EXIT_LAUNCH
    try:
        rows = bench(rt, args)
        _write_fragment(os.environ.get("APR_CSV_FRAGMENT"), rows)
        rt.finalize()
    except UsageError as exc:
        log.error("%s", exc)
        _hard_exit(EXIT_USAGE)
    except Exception:
        log.exception("rank %d: benchmark failed", rt.rank)
        _hard_exit(EXIT_FAILURE)
    return EXIT_OK


def _hard_exit(code: int) -> None:
    # peers may be blocked on us and worker pools may be stuck; skip cleanup
    sys.stdout.flush()
    sys.stderr.flush()
    os._exit(code)


# -- argument parsing ----------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    def d(value):
        return argparse.SUPPRESS if suppress else value

    parser.add_argument("--ranks", type=int, default=d(2), help="number of rank processes")
    parser.add_argument("--async", dest="async_mode", default=d("both"), metavar="on|off|both",
                        help="run with the progress shim, without it, or both")
    parser.add_argument("--eager-threshold", type=int, default=d(None), metavar="BYTES")
    parser.add_argument("--async-cpu-list", default=d(None), metavar="LIST",
                        help="cores for progress threads, e.g. 0_2_4")
    parser.add_argument("--link-bandwidth", type=float, default=d(None), metavar="BYTES_PER_S",
                        help="pace every link to this rate")
    parser.add_argument("--csv", default=d(None), metavar="PATH", help="output file (default stdout)")
    parser.add_argument("--seed", type=int, default=d(0))
    parser.add_argument("--reps", type=int, default=d(20), help="repetitions per point")
    parser.add_argument("--timeout", type=float, default=d(600.0), help="kill the job after this many seconds")
    parser.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asyncprogress", description=__doc__.split("\n\n")[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("overlap", parents=[common], help="t_t versus t_w for one large transfer")
    p.add_argument("--size", type=int, default=10 * MiB, help="message size V in bytes")
    p.add_argument("--tw-factors", default="0,0.25,0.5,1,2,4", help="t_w sweep as multiples of t_c")
    p.add_argument("--tw", default=None, help="explicit t_w sweep in seconds")
    p.add_argument("--fit-sizes", default=None, help="ping-pong sizes for the t_c fit")
    p.add_argument("--variant", default="isend_recv", choices=[v.value for v in Variant])

    p = sub.add_parser("pingpong", parents=[common], help="half round-trip time per message size")
    p.add_argument("--sizes", default=",".join(str(1 << k) for k in range(10, 25, 2)))

    p = sub.add_parser("ghostcell", parents=[common], help="1-D halo exchange, strong scaling")
    p.add_argument("--halo", type=int, default=MiB, help="halo size in bytes")
    p.add_argument("--base-work", type=float, default=0.05, help="work per iteration on one rank, seconds")
    p.add_argument("--triad-bytes", type=int, default=32 * 1024, help="triad array size in bytes")
    p.add_argument("--ring", action="store_true", help="periodic neighbours instead of a chain")

    p = sub.add_parser("spmvm", parents=[common], help="distributed sparse matrix-vector multiply")
    p.add_argument("--matrix", default=None, help="Matrix Market file")
    p.add_argument("--synthetic", choices=["banded", "random"], default="banded")
    p.add_argument("--rows", type=int, default=20000)
    p.add_argument("--nnz-per-row", type=int, default=16)
    p.add_argument("--half-bandwidth", type=int, default=2000)
    p.add_argument("--threads", type=int, default=2, help="threads per rank")
    p.add_argument("--modes", default="vector,vector_shim,task")
    p.add_argument("--comm-ratio", type=float, default=None,
                   help="pace links so halo transfer takes this multiple of the local phase")

    p = sub.add_parser("io-overlap", parents=[common], help="non-blocking file writes versus computation")
    p.add_argument("--volume", type=int, default=64 * MiB, help="bytes written per rank")
    p.add_argument("--throttle", type=float, default=64 * MiB, help="write rate per handle, bytes/s")
    p.add_argument("--chunk", type=int, default=4 * MiB)
    p.add_argument("--tw-factors", default="0,0.5,1,2", help="t_w sweep as multiples of t_io")
    p.add_argument("--tw", default=None, help="explicit t_w sweep in seconds")
    p.add_argument("--path", default=None, help="output file (default: temporary, removed afterwards)")
    p.add_argument("--keep", action="store_true")

    # ``worker <benchmark> ...`` is intercepted before parsing; listed for --help
    sub.add_parser("worker", help="internal: run one rank of a job")
    return parser


def _job_env(args) -> dict[str, str]:
    env = {}
    if args.eager_threshold is not None:
        if args.eager_threshold < 0:
            raise UsageError("--eager-threshold must be >= 0")
        env["APR_EAGER_THRESHOLD"] = str(args.eager_threshold)
    if args.async_cpu_list is not None:
        parse_affinity(args.async_cpu_list)
        env["APR_ASYNC_CPU_LIST"] = args.async_cpu_list
    if args.link_bandwidth is not None:
        if args.link_bandwidth <= 0:
            raise UsageError("--link-bandwidth must be positive")
        env["APR_LINK_BANDWIDTH"] = repr(args.link_bandwidth)
    return env


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    worker = bool(argv) and argv[0] == "worker"
    try:
        args = parser.parse_args(argv[1:] if worker else argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command == "worker":
        print("asyncprogress: error: worker is internal and needs a benchmark", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if worker:
        return run_worker(args)

    try:
        from .bench.common import parse_modes

        parse_modes(args.async_mode)
        spec = JobSpec(args.ranks, argv, _job_env(args), args.csv, args.timeout)
    except (UsageError, ConfigError) as exc:
        print(f"asyncprogress: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = launch(spec)
    except LaunchError as exc:
        print(f"asyncprogress: launch failed: {exc}", file=sys.stderr)
        return EXIT_LAUNCH
    if result.returncode != EXIT_OK:
        who = f"rank {result.failed_rank}" if result.failed_rank is not None else "job"
        print(f"asyncprogress: {who} failed (exit {result.returncode})\n{result.stderr_tail}", file=sys.stderr)
        return result.returncode
    text = result.csv_text()
    if spec.csv_path:
        Path(spec.csv_path).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


__all__ = ["JobSpec", "LaunchError", "LaunchResult", "build_parser", "launch", "main"]
