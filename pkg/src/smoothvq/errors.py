"""Exception hierarchy shared by the library and the CLI."""


class SmoothVQError(Exception):
    """Base class for all library errors."""

    #: process exit code used by the CLI when this error escapes a command
    exit_code = 2


class ShapeError(SmoothVQError, ValueError):
    pass


class SizeError(SmoothVQError, ValueError):
    pass


class CalibrationError(SmoothVQError, ValueError):
    pass


class InsufficientDataError(SmoothVQError, ValueError):
    pass


class ConfigError(SmoothVQError, ValueError):
    pass


class EmptyInputError(SmoothVQError, ValueError):
    pass


class DegenerateInputError(SmoothVQError, ValueError):
    """Raised when a statistic is undefined, e.g. kurtosis of a constant tensor."""


class CorruptionError(SmoothVQError):
    """Stored codes or payloads fail validation."""

    exit_code = 3


class FormatError(SmoothVQError):
    """A file has a bad magic, version or truncated header."""

    exit_code = 3
