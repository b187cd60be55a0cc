"""Exception hierarchy shared by all layers."""


class AsyncProgressError(Exception):
    pass


class UsageError(AsyncProgressError):
    """The caller violated an API contract (bad rank, double wait, ...)."""


class ConfigError(AsyncProgressError):
    pass


class EncodingError(AsyncProgressError):
    pass


class ProtocolError(AsyncProgressError):
    """Malformed or out-of-order traffic from a peer."""

    def __init__(self, message: str, rank: int | None = None):
        if rank is not None:
            message = f"rank {rank}: {message}"
        super().__init__(message)
        self.rank = rank


class StartupError(AsyncProgressError):
    def __init__(self, message: str, rank: int | None = None):
        if rank is not None:
            message = f"rank {rank}: {message}"
        super().__init__(message)
        self.rank = rank
