"""Exception hierarchy shared by every pipeline stage."""


class DrivetelError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(DrivetelError):
    """Bad configuration: unknown columns, invalid parameters, unknown flags."""

    exit_code = 2


class ParseError(DrivetelError):
    """A malformed field in an input file."""

    exit_code = 3

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class IntegrityError(DrivetelError):
    """Data violates a structural invariant (mixed trip flags, dangling ids...)."""

    exit_code = 3


class NumericalError(DrivetelError):
    """A numerical procedure failed (non-PD covariance, degenerate sample)."""

    exit_code = 4


class InsufficientDataError(NumericalError):
    pass


class DomainError(ValueError, DrivetelError):
    """Argument outside the domain of a function."""

    exit_code = 4


class StageError(DrivetelError):
    """Wraps any error raised inside a pipeline stage with the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
