"""Exception hierarchy shared by every module."""


class MssegError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class DimensionError(MssegError, ValueError):
    """Array extents do not fit the operation."""

    exit_code = 2


class ConfigurationError(MssegError, ValueError):
    exit_code = 1


class FormatError(MssegError):
    """A file could not be parsed; ``offset`` is the byte position when known."""

    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GeometryError(MssegError, ValueError):
    exit_code = 2

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class InputError(MssegError, ValueError):
    exit_code = 1


class UsageError(MssegError, RuntimeError):
    exit_code = 1


class OptimizationError(MssegError, FloatingPointError):
    """Training produced a non-finite value."""

    exit_code = 3
