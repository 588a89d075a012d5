"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PQAccelError(Exception):
    exit_code = 1


class ConfigError(PQAccelError):
    """Bad parameters, schedules, unknown groups or inconsistent configuration."""

    exit_code = 2


class ParameterError(ConfigError, ValueError):
    pass


class ShapeError(ConfigError, ValueError):
    pass


class ValidationError(ConfigError, ValueError):
    pass


class DataError(PQAccelError, ValueError):
    """Malformed or non-finite input data, including on-disk model files."""

    exit_code = 3


class VersionMismatchError(DataError):
    pass


class SizeMismatchError(DataError):
    pass


class MissingBlobError(DataError):
    pass


class DivergenceError(DataError):
    pass


class InfeasibleBudgetError(PQAccelError):
    exit_code = 4
