"""Exception hierarchy shared by every tcprune module."""


class TCPruneError(Exception):
    """Base class for all library errors."""


class ConfigError(TCPruneError, ValueError):
    """Invalid configuration value (bad K, lr, unknown method, ...)."""


class StructuralError(TCPruneError):
    """Graph / parameter structure is inconsistent with the requested operation."""


class NumericError(TCPruneError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class UsageError(TCPruneError, RuntimeError):
    """API called out of order (e.g. backward on an unrecorded trace)."""


class DataError(TCPruneError, ValueError):
    """Malformed dataset contents (labels out of range, shape drift)."""


class FormatError(DataError):
    """Binary file does not match the expected on-disk format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(TCPruneError, RuntimeError):
    """Training diverged; carries the last finite parameter state."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state
