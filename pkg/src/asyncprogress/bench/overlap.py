"""Overlap and ping-pong benchmarks between two ranks.

Overlap: rank 0 starts a non-blocking transfer, works for ``t_w`` and waits;
``t_t`` covers all three steps.  Without asynchronous progress the transfer
only runs inside the wait, so ``t_t = t_c + t_w``; with it, ``t_t =
max(t_c, t_w)``, where ``t_c = V / B_N + t_l`` comes from a ping-pong fit.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError
from ..runtime import Runtime
from ..shim import ShimConfig
from .common import Mode, barrier, comm_for_mode, fit_line, median
from .workload import busy_work

DATA_TAG = 7


class Variant(enum.Enum):
    ISEND_RECV = "isend_recv"
    IRECV_SEND = "irecv_send"
    ISEND_IRECV = "isend_irecv"


@dataclass(frozen=True)
class OverlapSample:
    t_w: float
    t_t: float
    V: int
    mode: Mode
    rep: int = 0
    variant: Variant = Variant.ISEND_RECV

    def __post_init__(self):
        if self.t_w < 0 or self.t_t < self.t_w:
            raise ValueError(f"inconsistent sample: t_t={self.t_t} < t_w={self.t_w}")


@dataclass(frozen=True)
class OverlapModel:
    B_N: float
    t_l: float

    def __post_init__(self):
        if self.B_N <= 0 or self.t_l < 0:
            raise ValueError(f"invalid model B_N={self.B_N}, t_l={self.t_l}")

    def t_c(self, V: float) -> float:
        return V / self.B_N + self.t_l


class FitError(ValueError):
    pass


def fit_overlap_model(sizes, times) -> OverlapModel:
    """Least-squares fit of ``t = V / B_N + t_l``."""
    if len(sizes) < 2 or len(set(sizes)) < 2:
        raise FitError("need at least two distinct message sizes")
    slope, intercept = fit_line(sizes, times)
    if slope <= 0:
        raise FitError(f"non-positive time per byte ({slope})")
    return OverlapModel(B_N=1.0 / slope, t_l=max(0.0, intercept))


def run_overlap(rt: Runtime, V: int, t_w_sweep, mode: Mode = Mode.SHIM_OFF,
                variant: Variant = Variant.ISEND_RECV, reps: int = 20,
                shim_config: ShimConfig | None = None, seed: int = 0) -> list[OverlapSample]:
    """Return rank 0's samples (other ranks return an empty list)."""
    if rt.size != 2:
        raise UsageError(f"the overlap benchmark needs exactly 2 ranks, got {rt.size}")
    rng = np.random.default_rng(seed)
    data = rng.integers(0, 256, V, dtype=np.uint8)
    buf = np.empty(V, dtype=np.uint8)
    samples = []
    with comm_for_mode(rt, mode, shim_config) as comm:
        for t_w in t_w_sweep:
            for rep in range(reps):
                barrier(comm)
                if comm.rank == 0:
                    t0 = time.perf_counter()
                    if variant is Variant.IRECV_SEND:
                        req = comm.irecv(buf, 1, DATA_TAG)
                    else:
                        req = comm.isend(data, 1, DATA_TAG)
                    busy_work(t_w)
                    comm.wait(req)
                    t_t = time.perf_counter() - t0
                    samples.append(OverlapSample(t_w, max(t_t, t_w), V, mode, rep, variant))
                elif variant is Variant.IRECV_SEND:
                    comm.wait(comm.isend(data, 0, DATA_TAG))
                else:
                    comm.wait(comm.irecv(buf, 0, DATA_TAG))
    return samples


def summarize(samples: list[OverlapSample]) -> list[tuple[Mode, float, float]]:
    """Median ``t_t`` per (mode, t_w)."""
    groups: dict[tuple[Mode, float], list[float]] = {}
    for s in samples:
        groups.setdefault((s.mode, s.t_w), []).append(s.t_t)
    return [(m, tw, median(v)) for (m, tw), v in sorted(groups.items(), key=lambda kv: (kv[0][0].value, kv[0][1]))]


@dataclass
class PingPongResult:
    mode: Mode
    sizes: list[int]
    t_oneway: list[float]
    model: OverlapModel | None = None
    samples: dict[int, list[float]] = field(default_factory=dict)

    @property
    def bandwidth(self) -> list[float]:
        return [v / t if t > 0 else float("inf") for v, t in zip(self.sizes, self.t_oneway)]


def run_pingpong(rt: Runtime, sizes, mode: Mode = Mode.SHIM_OFF, reps: int = 20,
                 fit_from: int | None = None, shim_config: ShimConfig | None = None,
                 warmup: int = 2) -> PingPongResult:
    """Half round-trip time per size, plus a model fitted on sizes >= ``fit_from``.

    ``fit_from`` defaults to the eager threshold when at least two sizes lie
    above it, otherwise all sizes are used.
    """
    sizes = [int(v) for v in sizes]
    if len(set(sizes)) < 2:
        raise FitError("ping-pong needs at least two distinct sizes to fit a model")
    if rt.size != 2:
        raise UsageError(f"ping-pong needs exactly 2 ranks, got {rt.size}")
    times: dict[int, list[float]] = {}
    with comm_for_mode(rt, mode, shim_config) as comm:
        for V in sizes:
            out = np.ones(V, dtype=np.uint8)
            back = np.empty(V, dtype=np.uint8)
            barrier(comm)
            t_list = []
            for i in range(warmup + reps):
                if comm.rank == 0:
                    t0 = time.perf_counter()
                    comm.wait(comm.isend(out, 1, DATA_TAG))
                    comm.wait(comm.irecv(back, 1, DATA_TAG))
                    dt = (time.perf_counter() - t0) / 2
                    if i >= warmup:
                        t_list.append(dt)
                else:
                    comm.wait(comm.irecv(back, 0, DATA_TAG))
                    comm.wait(comm.isend(out, 0, DATA_TAG))
            times[V] = t_list
    result = PingPongResult(mode, sizes, [median(times[v]) if times[v] else 0.0 for v in sizes], samples=times)
    if rt.rank == 0:
        if fit_from is None:
            big = [v for v in sizes if v > rt.eager_threshold]
            fit_from = rt.eager_threshold + 1 if len(set(big)) >= 2 else 0
        pts = [(v, t) for v, t in zip(sizes, result.t_oneway) if v >= fit_from]
        result.model = fit_overlap_model([p[0] for p in pts], [p[1] for p in pts])
    return result


def latency_samples(rt: Runtime, nbytes: int, count: int, mode: Mode,
                    shim_config: ShimConfig | None = None):
    """Round-trip times of ``count`` ping-pongs; returns (times, shim or None)."""
    if rt.size != 2:
        raise UsageError("latency test needs exactly 2 ranks")
    out = np.ones(nbytes, dtype=np.uint8)
    back = np.empty(nbytes, dtype=np.uint8)
    rtts = []
    with comm_for_mode(rt, mode, shim_config) as comm:
        barrier(comm)
        for _ in range(count):
            if comm.rank == 0:
                t0 = time.perf_counter()
                comm.wait(comm.isend(out, 1, DATA_TAG))
                comm.wait(comm.irecv(back, 1, DATA_TAG))
                rtts.append(time.perf_counter() - t0)
            else:
                comm.wait(comm.irecv(back, 0, DATA_TAG))
                comm.wait(comm.isend(out, 0, DATA_TAG))
        enqueued = comm.queue.enqueued if mode is Mode.SHIM_ON else 0
    return rtts, enqueued
