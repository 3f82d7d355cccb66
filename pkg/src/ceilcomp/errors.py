"""Exception hierarchy. CLI exit codes hang off ``exit_code``."""


class CeilCompError(Exception):
    exit_code = 1
    kind = "error"


class DimensionError(CeilCompError, ValueError):
    kind = "dimension"


class ConfigurationError(CeilCompError, ValueError):
    kind = "configuration"


class ParameterError(CeilCompError, ValueError):
    kind = "parameter"


class StateError(CeilCompError, RuntimeError):
    kind = "state"


class ArchitectureLookupError(CeilCompError, LookupError):
    kind = "lookup"


class DataError(CeilCompError):
    exit_code = 2
    kind = "data"


class DataIOError(DataError, OSError):
    """Missing or truncated data file."""
    kind = "io"


class FormatError(DataError):
    kind = "format"


class CorruptionError(FormatError):
    kind = "corruption"


class NumericalError(CeilCompError, ArithmeticError):
    exit_code = 3
    kind = "numerical"


class InfeasibleCeilingError(NumericalError):
    kind = "infeasible"

    def __init__(self, message, blocking_sites=()):
        super().__init__(message)
        self.blocking_sites = list(blocking_sites)
