"""Exception hierarchy. The CLI maps each category to an exit code."""


class ExitLabError(Exception):
    exit_code = 1


class ConfigError(ExitLabError, ValueError):
    exit_code = 2


class DataError(ExitLabError, ValueError):
    exit_code = 3


class TrainingError(ExitLabError, RuntimeError):
    exit_code = 4


class UsageError(ExitLabError, RuntimeError):
    """API misuse: out-of-range layer index, backward before forward, etc."""


class NumericError(ExitLabError, ArithmeticError):
    pass
