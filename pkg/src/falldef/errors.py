"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class FalldefError(Exception):
    exit_code = 2


class ShapeError(FalldefError, ValueError):
    """Array dimensions do not line up."""


class DataError(FalldefError, ValueError):
    """Bad input data: unparsable cells, missing classes, too few items."""


class ModelFormatError(FalldefError):
    """A model file is unreadable, of the wrong version, or internally inconsistent."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DivergenceError(FalldefError):
    """Training produced a non-finite loss or gradient."""

    exit_code = 3

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(FalldefError):
    exit_code = 1
