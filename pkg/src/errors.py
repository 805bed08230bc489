class DdstError(Exception):
    """Base class for every error raised by the link lab."""

    exit_code = 1


class DimensionError(DdstError, ValueError):
    exit_code = 2


class FormatError(DdstError, ValueError):
    exit_code = 2


class ConfigError(DdstError, ValueError):
    exit_code = 2


class UndefinedInputError(DdstError, ValueError):
    exit_code = 2


class CheckpointFormatError(FormatError):
    pass


class DependencyError(DdstError):
    exit_code = 3


class IllConditionedPilotError(DdstError, ArithmeticError):
    exit_code = 4


class CalibrationError(DdstError, ArithmeticError):
    exit_code = 4


class DivergenceError(DdstError, ArithmeticError):
    exit_code = 4
