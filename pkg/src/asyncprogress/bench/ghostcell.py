"""One-dimensional halo exchange under strong scaling.

Each iteration posts non-blocking halo receives and sends to both
neighbours, runs the triad workload for ``base_work / nprocs`` seconds and
waits for all transfers.  Visible communication time is the iteration time
minus the work time.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from ..errors import UsageError
from ..runtime import Runtime
from ..shim import ShimConfig
from .common import Mode, barrier, comm_for_mode, median
from .workload import L2_TRIAD_BYTES, Triad, busy_work

log = logging.getLogger(__name__)

HALO_TAG = 11


@dataclass
class GhostCellResult:
    mode: Mode
    rank: int
    ranks: int
    halo_bytes: int
    t_w: float
    t_visible_comm: float
    t_total: float
    iterations: int
    triad_ok: bool


def neighbours(rank: int, size: int, ring: bool = False) -> list[int]:
    if ring and size > 2:
        return [(rank - 1) % size, (rank + 1) % size]
    return [r for r in (rank - 1, rank + 1) if 0 <= r < size]


def run_ghostcell(rt: Runtime, halo_bytes: int, base_work: float, mode: Mode = Mode.SHIM_OFF,
                  iterations: int = 10, warmup: int = 2, ring: bool = False,
                  triad_bytes: int = L2_TRIAD_BYTES,
                  shim_config: ShimConfig | None = None) -> GhostCellResult:
    if rt.size < 2:
        raise UsageError("the ghost-cell benchmark needs at least 2 ranks")
    if halo_bytes <= rt.eager_threshold:
        log.warning("halo of %d bytes is sent eagerly; overlap comparison is not meaningful", halo_bytes)
    peers = neighbours(rt.rank, rt.size, ring)
    send = {p: np.full(halo_bytes, rt.rank % 251, dtype=np.uint8) for p in peers}
    recv = {p: np.empty(halo_bytes, dtype=np.uint8) for p in peers}
    triad = Triad(triad_bytes)
    triad.calibrate()
    work = base_work / rt.size
    t_w, t_vis, t_tot = [], [], []
    with comm_for_mode(rt, mode, shim_config) as comm:
        for it in range(warmup + iterations):
            barrier(comm)
            t0 = time.perf_counter()
            reqs = [comm.irecv(recv[p], p, HALO_TAG) for p in peers]
            reqs += [comm.isend(send[p], p, HALO_TAG) for p in peers]
            tw = busy_work(work, triad)
            comm.wait_all(reqs)
            total = time.perf_counter() - t0
            if it >= warmup:
                t_w.append(tw)
                t_tot.append(total)
                t_vis.append(total - tw)
    ok = triad.verify() and all(int(recv[p][0]) == p % 251 for p in peers)
    return GhostCellResult(mode, rt.rank, rt.size, halo_bytes, median(t_w), median(t_vis),
                           median(t_tot), iterations, ok)
