"""Overlap of non-blocking file writes with computation.

Every rank writes ``volume`` bytes at offset ``rank * volume`` of a shared
file, works for ``t_w`` and waits.  A throttled handle makes the write take
a predictable ``t_io`` on any disk.
"""

from __future__ import annotations

import logging
import os
import time

import numpy as np

from ..fileio import DEFAULT_CHUNK, FileMode, file_open
from ..runtime import Runtime
from ..shim import ShimConfig
from .common import Mode, barrier, comm_for_mode
from .overlap import OverlapSample
from .workload import busy_work

log = logging.getLogger(__name__)


def rank_payload(rank: int, volume: int, seed: int = 0) -> np.ndarray:
    """The bytes ``rank`` writes; also the oracle for checking the file."""
    return np.random.default_rng([seed, rank]).integers(0, 256, volume, dtype=np.uint8)


def expected_file(ranks: int, volume: int, seed: int = 0) -> bytes:
    return b"".join(rank_payload(r, volume, seed).tobytes() for r in range(ranks))


def run_io_overlap(rt: Runtime, path: str | os.PathLike, volume: int, t_w_sweep,
                   mode: Mode = Mode.SHIM_OFF, reps: int = 5, throttle: float | None = None,
                   chunk_size: int = DEFAULT_CHUNK, seed: int = 0,
                   shim_config: ShimConfig | None = None) -> list[OverlapSample]:
    """Return this rank's samples; ``V`` in each sample is ``volume``."""
    if throttle is None and not os.environ.get("APR_IO_THROTTLE"):
        log.warning("no I/O throttle set; on a fast disk t_io is tiny and the overlap is not measurable")
    data = rank_payload(rt.rank, volume, seed)
    if rt.rank == 0:
        with open(path, "wb"):
            pass
    barrier(rt)
    samples = []
    handle = file_open(path, FileMode.RDWR, throttle=throttle, chunk_size=chunk_size)
    try:
        with comm_for_mode(rt, mode, shim_config) as comm:
            for t_w in t_w_sweep:
                for rep in range(reps):
                    barrier(comm)
                    t0 = time.perf_counter()
                    req = comm.file_iwrite_at(handle, rt.rank * volume, data)
                    busy_work(t_w)
                    status = comm.wait(req)
                    t_t = time.perf_counter() - t0
                    if status.received_bytes != volume:
                        raise OSError(f"short write: {status.received_bytes} of {volume} bytes")
                    samples.append(OverlapSample(t_w, max(t_t, t_w), volume, mode, rep))
            barrier(comm)
    finally:
        handle.close()
    return samples
