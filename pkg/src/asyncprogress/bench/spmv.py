"""Distributed sparse matrix-vector multiply ``y = y + M v``.

Rows are split into contiguous blocks holding about the same number of
nonzeros; the vector is distributed the same way.  Each rank multiplies in
two phases: a local phase with the columns it owns, and a non-local phase
with vector entries received from other ranks.  Three ways of overlapping
the exchange with the local phase are compared:

* VECTOR: post non-blocking exchanges, local phase on all threads, wait-all.
* VECTOR_SHIM: same, with the progress thread driving the exchange.
* TASK: one thread does the (blocking) communication while the others
  compute the local phase.
"""

from __future__ import annotations

import concurrent.futures
import enum
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..errors import UsageError
from ..runtime import Runtime
from ..shim import ShimConfig
from .common import Mode, barrier, broadcast, comm_for_mode, gather_arrays, median

SPMV_TAG = 21
PARAM_TAG = 22


@dataclass
class CsrMatrix:
    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.row_ptr = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.ascontiguousarray(self.col_idx, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.row_ptr.shape != (self.n_rows + 1,):
            raise ValueError(f"row_ptr must have n_rows+1={self.n_rows + 1} entries")
        if self.row_ptr[0] != 0 or np.any(np.diff(self.row_ptr) < 0):
            raise ValueError("row_ptr must start at 0 and be non-decreasing")
        nnz = int(self.row_ptr[-1])
        if len(self.col_idx) != nnz or len(self.values) != nnz:
            raise ValueError("col_idx/values length must equal row_ptr[-1]")
        if nnz and (self.col_idx.min() < 0 or self.col_idx.max() >= self.n_cols):
            raise ValueError("column index out of range")

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    @cached_property
    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), self.row_nnz())

    @classmethod
    def from_coo(cls, rows, cols, vals, shape: tuple[int, int]) -> "CsrMatrix":
        """Build from triplets; duplicate entries are summed."""
        n_rows, n_cols = shape
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows):
            first = np.ones(len(rows), dtype=bool)
            first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            group = np.cumsum(first) - 1
            vals = np.bincount(group, weights=vals)
            rows, cols = rows[first], cols[first]
        row_ptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=row_ptr[1:])
        return cls(n_rows, n_cols, row_ptr, cols, vals)

    @classmethod
    def from_dense(cls, dense) -> "CsrMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(dense)
        return cls.from_coo(rows, cols, dense[rows, cols], dense.shape)

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        np.add.at(out, (self.row_ids, self.col_idx), self.values)
        return out

    def matvec_add(self, x: np.ndarray, y: np.ndarray, lo: int = 0, hi: int | None = None) -> None:
        """``y[lo:hi] += self[lo:hi] @ x``."""
        hi = self.n_rows if hi is None else hi
        k0, k1 = self.row_ptr[lo], self.row_ptr[hi]
        if k0 == k1:
            return
        prod = self.values[k0:k1] * x[self.col_idx[k0:k1]]
        y[lo:hi] += np.bincount(self.row_ids[k0:k1] - lo, weights=prod, minlength=hi - lo)

    def select(self, lo: int, hi: int, mask: np.ndarray, cols: np.ndarray, n_cols: int) -> "CsrMatrix":
        """Rows ``lo:hi`` keeping entries where ``mask``; ``cols`` are the new column ids."""
        k0 = self.row_ptr[lo]
        rows = self.row_ids[k0 : self.row_ptr[hi]] - lo
        counts = np.bincount(rows[mask], minlength=hi - lo)
        row_ptr = np.zeros(hi - lo + 1, dtype=np.int64)
        np.cumsum(counts, out=row_ptr[1:])
        vals = self.values[k0 : self.row_ptr[hi]][mask]
        return CsrMatrix(hi - lo, n_cols, row_ptr, cols, vals)


def banded_matrix(n: int, half_bandwidth: int, nnz_per_row: int, seed: int = 0) -> CsrMatrix:
    """Diagonal plus ``nnz_per_row - 1`` random entries within the band."""
    rng = np.random.default_rng(seed)
    extra = max(0, nnz_per_row - 1)
    rows = np.repeat(np.arange(n), extra)
    offsets = rng.integers(-half_bandwidth, half_bandwidth + 1, size=n * extra)
    cols = np.clip(rows + offsets, 0, n - 1)
    rows = np.concatenate([np.arange(n), rows])
    cols = np.concatenate([np.arange(n), cols])
    vals = rng.uniform(-1.0, 1.0, size=len(rows))
    vals[:n] += 2.0 * nnz_per_row
    return CsrMatrix.from_coo(rows, cols, vals, (n, n))


def random_matrix(n: int, nnz_per_row: int, seed: int = 0) -> CsrMatrix:
    rng = np.random.default_rng(seed)
    rows = np.repeat(np.arange(n), nnz_per_row)
    cols = rng.integers(0, n, size=len(rows))
    vals = rng.uniform(-1.0, 1.0, size=len(rows))
    return CsrMatrix.from_coo(rows, cols, vals, (n, n))


def read_matrix_market(path) -> CsrMatrix:
    import scipy.io

    coo = scipy.io.mmread(path).tocoo()
    return CsrMatrix.from_coo(coo.row, coo.col, coo.data, coo.shape)


def write_matrix_market(path, matrix: CsrMatrix) -> None:
    import scipy.io
    import scipy.sparse

    coo = scipy.sparse.coo_matrix((matrix.values, (matrix.row_ids, matrix.col_idx)), shape=matrix.shape)
    scipy.io.mmwrite(path, coo)


@dataclass(frozen=True)
class RowPartition:
    cuts: tuple[int, ...]

    @property
    def parts(self) -> int:
        return len(self.cuts) - 1

    def block(self, rank: int) -> tuple[int, int]:
        return self.cuts[rank], self.cuts[rank + 1]

    def blocks(self) -> list[tuple[int, int]]:
        return [self.block(r) for r in range(self.parts)]

    def owner(self, index):
        return np.searchsorted(np.asarray(self.cuts), index, side="right") - 1


def partition_rows_by_nnz(matrix: CsrMatrix, parts: int) -> RowPartition:
    """Contiguous row blocks with about ``nnz / parts`` nonzeros each.

    Cut ``k`` goes at the first row boundary where the running nonzero
    count reaches ``k * nnz / parts``; every block keeps at least one row.
    Greedy cuts can leave two blocks further apart than one row's worth of
    nonzeros (e.g. rows ``[0, 1, 2, 0]`` in two parts give 3 and 0).  In
    that case the cuts are re-placed by :func:`_window_cuts` so that
    ``max - min <= max row nnz``.
    """
    n = matrix.n_rows
    if n == 0:
        raise ValueError("cannot partition an empty matrix")
    if not 1 <= parts <= n:
        raise ValueError(f"parts must be in [1, {n}], got {parts}")
    prefix = matrix.row_ptr if matrix.nnz else np.arange(n + 1, dtype=np.int64)
    prefix = np.asarray(prefix, dtype=np.int64)
    total = int(prefix[-1])
    scaled = prefix * parts
    cuts = [0]
    for k in range(1, parts):
        i = int(np.searchsorted(scaled, k * total, side="left"))
        i = max(i, cuts[-1] + 1)
        i = min(i, n - (parts - k))
        cuts.append(i)
    cuts.append(n)
    width = int(np.diff(prefix).max())
    sums = np.diff(prefix[cuts])
    if sums.max() - sums.min() > width:
        cuts = _balanced_cuts(prefix, parts, width) or cuts
    return RowPartition(tuple(cuts))


def _balanced_cuts(prefix: np.ndarray, parts: int, width: int) -> list[int] | None:
    total = int(prefix[-1])
    hi_low = total // parts
    lows = range(hi_low, hi_low - width - 1, -1)
    # try windows centred on the ideal share first
    for low in sorted(lows, key=lambda lo: (abs(2 * lo + width - 2 * total / parts), -lo)):
        cuts = _window_cuts(prefix, parts, low, width)
        if cuts is not None:
            return cuts
    return None


def _window_cuts(prefix: np.ndarray, parts: int, low: int, width: int) -> list[int] | None:
    """Cuts with every block's nnz in ``[low, low + width]``, or None.

    ``reach[k][j]`` says row boundary ``j`` can end the ``k``-th block.
    Rows are non-empty blocks, so a block ending at ``j`` starts at some
    ``i < j``.
    """
    n = len(prefix) - 1
    idx = np.arange(n + 1)
    first = np.searchsorted(prefix, prefix - low - width, side="left")
    last = np.minimum(np.searchsorted(prefix, prefix - low, side="right"), idx)
    reach = [idx == 0]
    for _ in range(parts):
        count = np.concatenate([[0], np.cumsum(reach[-1])])
        reach.append((last > first) & (count[last] > count[np.minimum(first, last)]))
    if not reach[parts][n]:
        return None
    total = int(prefix[-1])
    cuts, j = [n], n
    for k in range(parts - 1, 0, -1):
        cand = np.flatnonzero(reach[k][first[j] : last[j]]) + first[j]
        ideal = k * total / parts
        i = int(cand[np.argmin(np.abs(prefix[cand] - ideal))])
        cuts.append(i)
        j = i
    cuts.append(0)
    return cuts[::-1]


@dataclass
class PhaseSplit:
    rank: int
    lo: int
    hi: int
    local: CsrMatrix
    nonlocal_: CsrMatrix
    # global column ids backing the receive buffer, ascending
    remote_cols: np.ndarray
    # owner rank -> (start, count) in the receive buffer
    recv_ranges: dict[int, tuple[int, int]] = field(default_factory=dict)


def spmv_phase_split(matrix: CsrMatrix, partition: RowPartition, rank: int) -> PhaseSplit:
    lo, hi = partition.block(rank)
    k0, k1 = matrix.row_ptr[lo], matrix.row_ptr[hi]
    cols = matrix.col_idx[k0:k1]
    mine = (cols >= lo) & (cols < hi)
    local = matrix.select(lo, hi, mine, cols[mine] - lo, hi - lo)
    remote_cols = np.unique(cols[~mine])
    nonlocal_ = matrix.select(lo, hi, ~mine, np.searchsorted(remote_cols, cols[~mine]), len(remote_cols))
    ranges = {}
    if len(remote_cols):
        owners = partition.owner(remote_cols)
        for q in np.unique(owners):
            idx = np.flatnonzero(owners == q)
            ranges[int(q)] = (int(idx[0]), len(idx))
    return PhaseSplit(rank, lo, hi, local, nonlocal_, remote_cols, ranges)


def send_plan(matrix: CsrMatrix, partition: RowPartition, rank: int) -> dict[int, np.ndarray]:
    """Local indices of owned vector entries each other rank needs from ``rank``."""
    lo, hi = partition.block(rank)
    plan = {}
    for q in range(partition.parts):
        if q == rank:
            continue
        qlo, qhi = partition.block(q)
        cols = np.unique(matrix.col_idx[matrix.row_ptr[qlo] : matrix.row_ptr[qhi]])
        need = cols[(cols >= lo) & (cols < hi)]
        if len(need):
            plan[q] = need - lo
    return plan


class SpmvMode(enum.Enum):
    VECTOR = "vector"
    VECTOR_SHIM = "vector_shim"
    TASK = "task"


@dataclass
class SpmvResult:
    mode: SpmvMode
    rank: int
    ranks: int
    threads: int
    n_rows: int
    nnz: int
    t_multiply: float
    t_local: float
    t_wait: float
    t_nonlocal: float
    max_message_bytes: int
    y: np.ndarray | None = None


def _chunks(m: CsrMatrix, n: int) -> list[tuple[int, int]]:
    if m.n_rows == 0:
        return []
    return partition_rows_by_nnz(m, max(1, min(n, m.n_rows))).blocks()


def _run_chunks(pool, m: CsrMatrix, x, y, chunks) -> None:
    if len(chunks) <= 1:
        for lo, hi in chunks:
            m.matvec_add(x, y, lo, hi)
        return
    for f in [pool.submit(m.matvec_add, x, y, lo, hi) for lo, hi in chunks]:
        f.result()


def global_vectors(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """The right-hand side ``v`` and the initial ``y`` shared by all ranks."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal(n), rng.standard_normal(n)


class _RankSpmv:
    """Per-rank state of the distributed multiply."""

    def __init__(self, rt: Runtime, matrix: CsrMatrix, partition: RowPartition, seed: int):
        if matrix.n_rows != matrix.n_cols:
            raise UsageError("spMVM needs a square matrix")
        if partition.parts != rt.size:
            raise UsageError(f"partition has {partition.parts} blocks for {rt.size} ranks")
        self.split = spmv_phase_split(matrix, partition, rt.rank)
        self.sends = send_plan(matrix, partition, rt.rank)
        v, y0 = global_vectors(matrix.n_rows, seed)
        lo, hi = self.split.lo, self.split.hi
        self.x = v[lo:hi].copy()
        self.y0 = y0[lo:hi].copy()
        self.y = self.y0.copy()
        self.recvbuf = np.empty(len(self.split.remote_cols))
        self.sendbufs = {q: np.empty(len(idx)) for q, idx in self.sends.items()}

    @property
    def max_message_bytes(self) -> int:
        sizes = [8 * len(b) for b in self.sendbufs.values()]
        sizes += [8 * c for _, c in self.split.recv_ranges.values()]
        return max(sizes, default=0)

    def post(self, comm) -> list:
        for q, idx in self.sends.items():
            np.take(self.x, idx, out=self.sendbufs[q])
        reqs = [comm.irecv(self.recvbuf[s : s + c], q, SPMV_TAG) for q, (s, c) in self.split.recv_ranges.items()]
        reqs += [comm.isend(self.sendbufs[q], q, SPMV_TAG) for q in self.sends]
        return reqs


def calibrate_comm(rt: Runtime, matrix: CsrMatrix, ratio: float = 1.0, threads: int = 1,
                   seed: int = 0, reps: int = 5) -> float | None:
    """Set the link rate so the largest halo message takes ``ratio`` x local-phase time.

    Rank 0 measures and sends the rate to everyone; returns the rate applied.
    """
    part = partition_rows_by_nnz(matrix, rt.size)
    state = _RankSpmv(rt, matrix, part, seed)
    chunks = _chunks(state.split.local, threads)
    times = []
    with concurrent.futures.ThreadPoolExecutor(max(1, threads)) as pool:
        for _ in range(reps):
            barrier(rt)
            t0 = time.perf_counter()
            _run_chunks(pool, state.split.local, state.x, state.y, chunks)
            times.append(time.perf_counter() - t0)
    local = np.array([median(times), state.max_message_bytes], dtype=np.float64)
    if rt.rank == 0:
        worst = local.copy()
        for r in range(1, rt.size):
            peer = np.empty(2)
            rt.wait(rt.irecv(peer, r, PARAM_TAG))
            worst = np.maximum(worst, peer)
        t_local, nbytes = worst
        rate = nbytes / (ratio * t_local) if t_local > 0 and nbytes > 0 else 0.0
    else:
        rt.wait(rt.isend(local, 0, PARAM_TAG))
        rate = 0.0
    out = broadcast(rt, [rate])
    rate = float(out[0])
    if rate > 0:
        rt.set_link_bandwidth(rate)
        return rate
    return None


def run_spmvm(rt: Runtime, matrix: CsrMatrix, threads_per_rank: int = 2,
              mode: SpmvMode = SpmvMode.VECTOR, iterations: int = 10, warmup: int = 2,
              seed: int = 0, partition: RowPartition | None = None,
              shim_config: ShimConfig | None = None, gather: bool = True) -> SpmvResult:
    """Time ``iterations`` multiplies; rank 0 gets the full result vector."""
    if threads_per_rank < 1:
        raise UsageError("threads_per_rank must be >= 1")
    if mode is SpmvMode.TASK and threads_per_rank < 2:
        raise UsageError("task mode needs at least 2 threads (one is reserved for communication)")
    partition = partition or partition_rows_by_nnz(matrix, rt.size)
    state = _RankSpmv(rt, matrix, partition, seed)
    split = state.split
    workers = threads_per_rank - 1 if mode is SpmvMode.TASK else threads_per_rank
    local_chunks = _chunks(split.local, workers)
    nonlocal_chunks = _chunks(split.nonlocal_, threads_per_rank)
    shim_mode = Mode.SHIM_ON if mode is SpmvMode.VECTOR_SHIM else Mode.SHIM_OFF
    t_mult, t_loc, t_wait, t_nl = [], [], [], []
    pool = concurrent.futures.ThreadPoolExecutor(threads_per_rank)
    comm_thread = concurrent.futures.ThreadPoolExecutor(1) if mode is SpmvMode.TASK else None
    try:
        with comm_for_mode(rt, shim_mode, shim_config) as comm:
            for it in range(warmup + iterations):
                barrier(comm)
                state.y[:] = state.y0
                t0 = time.perf_counter()
                if comm_thread is not None:
                    job = comm_thread.submit(lambda: comm.wait_all(state.post(comm)))
                else:
                    reqs = state.post(comm)
                _run_chunks(pool, split.local, state.x, state.y, local_chunks)
                t1 = time.perf_counter()
                if comm_thread is not None:
                    job.result()
                else:
                    comm.wait_all(reqs)
                t2 = time.perf_counter()
                _run_chunks(pool, split.nonlocal_, state.recvbuf, state.y, nonlocal_chunks)
                t3 = time.perf_counter()
                if it >= warmup:
                    t_mult.append(t3 - t0)
                    t_loc.append(t1 - t0)
                    t_wait.append(t2 - t1)
                    t_nl.append(t3 - t2)
            y = None
            if gather:
                parts = gather_arrays(comm, state.y)
                y = np.concatenate(parts) if parts is not None else None
    finally:
        pool.shutdown()
        if comm_thread is not None:
            comm_thread.shutdown()
    return SpmvResult(mode, rt.rank, rt.size, threads_per_rank, matrix.n_rows, matrix.nnz,
                      median(t_mult), median(t_loc), median(t_wait), median(t_nl),
                      state.max_message_bytes, y)


def serial_reference(matrix: CsrMatrix, seed: int) -> np.ndarray:
    """``y0 + M v`` computed independently with scipy."""
    import scipy.sparse

    v, y0 = global_vectors(matrix.n_rows, seed)
    m = scipy.sparse.csr_matrix((matrix.values, matrix.col_idx, matrix.row_ptr), shape=matrix.shape)
    return y0 + m @ v


def relative_error(y: np.ndarray, ref: np.ndarray) -> float:
    denom = np.linalg.norm(ref)
    return float(np.linalg.norm(y - ref) / (denom if denom else 1.0))
