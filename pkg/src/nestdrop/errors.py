"""Exception hierarchy.

Every error raised by the library derives from :class:`NestDropError`.
Each top-level family carries the process exit code the CLI reports.
"""


class NestDropError(Exception):
    exit_code = 1


class ConfigError(NestDropError, ValueError):
    """Invalid configuration, spec, or parameter value."""

    exit_code = 2


class InvalidShapeError(ConfigError):
    pass


class InvalidParameterError(ConfigError):
    pass


class InvalidLabelError(ConfigError):
    pass


class NoRemainingUnitsError(InvalidParameterError):
    """Sampling requested when every unit is already swept."""


class DataError(NestDropError):
    exit_code = 3


class MalformedFileError(DataError):
    pass


class InconsistentDataError(DataError):
    pass


class CorruptCheckpointError(DataError):
    pass


class CurveParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DivergenceError(NestDropError, FloatingPointError):
    exit_code = 4

    def __init__(self, iteration, loss):
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class ProtocolError(NestDropError, RuntimeError):
    exit_code = 5
