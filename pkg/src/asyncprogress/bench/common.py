"""Shared benchmark plumbing: modes, barrier, statistics."""

from __future__ import annotations

import contextlib
import enum
import statistics
from typing import Iterator, Sequence

import numpy as np

from ..errors import UsageError
from ..runtime import Runtime
from ..shim import Shim, ShimConfig

# tags at or above this are reserved for benchmark control traffic
CONTROL_TAG = 1 << 30
BARRIER_TAG = CONTROL_TAG + 1
GATHER_TAG = CONTROL_TAG + 2
BCAST_TAG = CONTROL_TAG + 3


class Mode(enum.Enum):
    SHIM_ON = "SHIM_ON"
    SHIM_OFF = "SHIM_OFF"


def parse_modes(text: str) -> list[Mode]:
    """``on``/``off``/``both`` as used by the ``--async`` flag."""
    text = text.strip().lower()
    if text == "both":
        return [Mode.SHIM_OFF, Mode.SHIM_ON]
    if text in ("on", "1"):
        return [Mode.SHIM_ON]
    if text in ("off", "0"):
        return [Mode.SHIM_OFF]
    raise UsageError(f"--async must be on, off or both, got {text!r}")


@contextlib.contextmanager
def comm_for_mode(rt: Runtime, mode: Mode, config: ShimConfig | None = None) -> Iterator:
    """Yield the runtime itself or a shim with a running progress thread."""
    if mode is Mode.SHIM_OFF:
        yield rt
        return
    config = config or ShimConfig.from_env()
    config.enabled = True
    shim = Shim(rt, config)
    shim.start()
    try:
        yield shim
    finally:
        shim.stop()


def barrier(comm, tag: int = BARRIER_TAG) -> None:
    """Gather-then-release with zero-byte messages."""
    if comm.size == 1:
        return
    token = bytearray(0)
    if comm.rank == 0:
        comm.wait_all([comm.irecv(bytearray(0), r, tag) for r in range(1, comm.size)])
        comm.wait_all([comm.isend(token, r, tag) for r in range(1, comm.size)])
    else:
        comm.wait(comm.isend(token, 0, tag))
        comm.wait(comm.irecv(bytearray(0), 0, tag))


def gather_arrays(comm, part: np.ndarray, tag: int = GATHER_TAG) -> list[np.ndarray] | None:
    """Collect one 1-D float64 array per rank on rank 0."""
    sizes = np.zeros(1, dtype=np.int64)
    if comm.rank != 0:
        sizes[0] = part.size
        comm.wait(comm.isend(sizes, 0, tag))
        comm.wait(comm.isend(np.ascontiguousarray(part), 0, tag))
        return None
    parts = [np.ascontiguousarray(part)]
    for r in range(1, comm.size):
        comm.wait(comm.irecv(sizes, r, tag))
        buf = np.empty(int(sizes[0]))
        comm.wait(comm.irecv(buf, r, tag))
        parts.append(buf)
    return parts


def broadcast(comm, values, root: int = 0, tag: int = BCAST_TAG) -> np.ndarray:
    """Send ``root``'s float64 values to every rank; all ranks pass the same length."""
    buf = np.array(values, dtype=np.float64).ravel()
    if comm.rank == root:
        comm.wait_all([comm.isend(buf, r, tag) for r in range(comm.size) if r != root])
    else:
        comm.wait(comm.irecv(buf, root, tag))
    return buf


def median(values: Sequence[float]) -> float:
    return statistics.median(values)


def fit_line(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Least-squares ``y = slope * x + intercept``."""
    if len(x) < 2:
        raise ValueError("need at least two points to fit a line")
    slope, intercept = np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)
    return float(slope), float(intercept)
