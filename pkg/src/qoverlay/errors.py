"""Exception hierarchy shared by all planes."""


class QOverlayError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(QOverlayError, ValueError):
    pass


class UnknownNode(QOverlayError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class SessionTimeout(QOverlayError):
    pass


class ReconciliationFailed(QOverlayError):
    pass


class InsufficientKey(QOverlayError):
    """Privacy amplification would leave no usable key."""


class CircuitUnavailable(QOverlayError):
    pass


class KeyExhausted(QOverlayError):
    pass


class DeliveryFailed(QOverlayError):
    pass


class DesyncError(QOverlayError):
    pass


class DuplicateLink(QOverlayError):
    pass


class PathUnavailable(QOverlayError):
    def __init__(self, hop: int, reason: str = ""):
        self.hop = hop
        self.reason = reason
        super().__init__(f"hop {hop} unavailable" + (f": {reason}" if reason else ""))


class InvalidFilter(QOverlayError, ValueError):
    pass


class InvalidEvent(QOverlayError, ValueError):
    pass


class PolicySyntaxError(QOverlayError, ValueError):
    pass


class NotFound(QOverlayError, LookupError):
    pass


class PartialAggregate(QOverlayError):
    def __init__(self, missing: list[int], partial=None):
        self.missing = list(missing)
        self.partial = partial
        super().__init__(f"no report from regions {self.missing}")


class ConfigError(QOverlayError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
