"""Benchmarks: overlap, ping-pong, ghost-cell, spMVM and file I/O overlap."""

from .common import Mode, barrier, comm_for_mode, gather_arrays, parse_modes
from .ghostcell import GhostCellResult, run_ghostcell
from .io_overlap import run_io_overlap
from .overlap import (
    FitError,
    OverlapModel,
    OverlapSample,
    PingPongResult,
    Variant,
    fit_overlap_model,
    run_overlap,
    run_pingpong,
)
from .spmv import (
    CsrMatrix,
    RowPartition,
    SpmvMode,
    SpmvResult,
    partition_rows_by_nnz,
    run_spmvm,
    spmv_phase_split,
)
from .workload import Triad, busy_work

__all__ = [
    "CsrMatrix", "FitError", "GhostCellResult", "Mode", "OverlapModel", "OverlapSample",
    "PingPongResult", "RowPartition", "SpmvMode", "SpmvResult", "Triad", "Variant", "barrier",
    "busy_work", "comm_for_mode", "fit_overlap_model", "gather_arrays", "parse_modes",
    "partition_rows_by_nnz", "run_ghostcell", "run_io_overlap", "run_overlap", "run_pingpong",
    "run_spmvm", "spmv_phase_split",
]
