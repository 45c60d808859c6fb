from typing import Optional


class KvbenchError(Exception):
    pass


class InvalidParameterError(KvbenchError, ValueError):
    pass


class InvalidBaselineError(InvalidParameterError):
    pass


class NoDataError(KvbenchError):
    pass


class ConnectFailedError(KvbenchError):
    """Base for every failure to open or keep a server connection."""


class ConnectTimeoutError(ConnectFailedError):
    pass


class ConnectRefusedError(ConnectFailedError):
    pass


class AuthenticationError(ConnectFailedError):
    pass


class ConnectionLostError(ConnectFailedError):
    """The peer reset or closed the connection mid-conversation."""


class ProtocolDesyncError(KvbenchError):
    """An unparseable frame arrived; the connection can no longer be trusted."""


class InfoUnavailableError(KvbenchError):
    pass


class ConfigError(KvbenchError):
    pass


class OutputLockedError(KvbenchError):
    pass


class PreloadError(KvbenchError):
    """A preload stopped early. ``completed`` and ``remaining`` are inclusive
    rank ranges, so the load can be resumed with ``remaining``."""

    def __init__(
        self,
        message: str,
        completed: Optional[list[tuple[int, int]]] = None,
        remaining: Optional[list[tuple[int, int]]] = None,
    ) -> None:
        super().__init__(message)
        self.completed = completed or []
        self.remaining = remaining or []

    @property
    def last_completed(self) -> Optional[tuple[int, int]]:
        return self.completed[-1] if self.completed else None
