"""Exception types shared across the package."""


class HeadfuseError(Exception):
    """Base class for all package errors."""


class ShapeError(HeadfuseError, ValueError):
    """Rejected input: array shapes or channel counts do not agree."""


class UsageError(HeadfuseError, RuntimeError):
    """An API was called in a state where it cannot work."""


class ConfigError(HeadfuseError, ValueError):
    """Invalid or incomplete configuration."""


class WireFormatError(HeadfuseError, ValueError):
    """A byte stream could not be parsed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingError(HeadfuseError, RuntimeError):
    """Training diverged or produced a non-finite loss."""
