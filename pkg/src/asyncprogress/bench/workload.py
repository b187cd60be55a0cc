"""Calibrated CPU-bound work: the triad ``a = b * c + d``."""

from __future__ import annotations

import time

import numpy as np

L1_TRIAD_BYTES = 4 * 1024  # per array; four arrays stay well inside L1
L2_TRIAD_BYTES = 32 * 1024


class Triad:
    def __init__(self, array_bytes: int = L1_TRIAD_BYTES):
        n = max(1, array_bytes // 8)
        self.a = np.zeros(n)
        self.b = np.linspace(0.5, 1.5, n)
        self.c = np.linspace(2.0, 1.0, n)
        self.d = np.full(n, 0.25)
        self.sweeps = 0
        self.batch = 1

    def step(self, sweeps: int = 1) -> None:
        a, b, c, d = self.a, self.b, self.c, self.d
        for _ in range(sweeps):
            np.multiply(b, c, out=a)
            np.add(a, d, out=a)
        self.sweeps += sweeps

    def verify(self) -> bool:
        return bool(np.array_equal(self.a, self.b * self.c + self.d))

    def calibrate(self, target: float = 1e-4) -> int:
        """Pick a batch size so one batch takes about ``target`` seconds."""
        sweeps = 64
        t0 = time.perf_counter()
        self.step(sweeps)
        per_sweep = max((time.perf_counter() - t0) / sweeps, 1e-8)
        self.batch = max(1, int(target / per_sweep))
        return self.batch


_default: Triad | None = None


def default_triad() -> Triad:
    global _default
    if _default is None:
        _default = Triad()
        _default.calibrate()
    return _default


def busy_work(duration: float, triad: Triad | None = None) -> float:
    """Run triad sweeps until ``duration`` seconds have passed.

    The deadline is checked against the monotonic clock after every batch,
    so the wall time is exact to within one batch (~0.1 ms) even when other
    threads or processes compete for the core.  Returns the elapsed time.
    """
    t0 = time.perf_counter()
    if duration <= 0:
        return 0.0
    triad = triad or default_triad()
    deadline = t0 + duration
    batch = triad.batch
    while time.perf_counter() < deadline:
        triad.step(batch)
    return time.perf_counter() - t0
