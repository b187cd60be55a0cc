"""Asynchronous progress for a non-blocking message-passing runtime.

``runtime`` is a small point-to-point library (eager and rendezvous
protocols, MPI-style matching) that only makes progress inside its own
calls.  ``shim`` wraps it with a progress thread so large transfers and
file writes advance while the application computes.
"""

from .errors import AsyncProgressError, ConfigError, EncodingError, ProtocolError, StartupError, UsageError
from .runtime import ANY_SOURCE, ANY_TAG, ErrorCode, Job, Request, RequestState, Runtime, Status, ThreadLevel, init
from .shim import ProxyRequest, Shim, ShimConfig, WaitsetStrategy, shim_init

__version__ = "0.1.0"

__all__ = [
    "ANY_SOURCE", "ANY_TAG", "AsyncProgressError", "ConfigError", "EncodingError", "ErrorCode", "Job",
    "ProtocolError", "ProxyRequest", "Request", "RequestState", "Runtime", "Shim", "ShimConfig",
    "StartupError", "Status", "ThreadLevel", "UsageError", "WaitsetStrategy", "init", "shim_init",
]
