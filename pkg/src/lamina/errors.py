"""Exception hierarchy.

Every error raised by the library derives from :class:`LaminaError`, which
carries the CLI exit code it maps to.
"""


class LaminaError(Exception):
    exit_code = 3


class ParameterError(LaminaError, ValueError):
    exit_code = 2


class GeometryError(LaminaError, ValueError):
    pass


class DomainError(LaminaError, ValueError):
    pass


class DataError(LaminaError, ValueError):
    pass


class FormatError(LaminaError, ValueError):
    pass


class ConversionError(LaminaError, ValueError):
    pass


class TopologyError(DataError):
    pass


class StageError(DataError):
    pass


class SpecError(ParameterError):
    pass


class ConvergenceError(LaminaError, RuntimeError):
    exit_code = 4
