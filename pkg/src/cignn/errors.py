"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
2 for configuration problems, 3 for data problems, 4 for numeric failures.
"""


class CignnError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(CignnError):
    exit_code = 2
    kind = "config"


class InputError(ConfigError, ValueError):
    """Invalid argument passed to a library function."""

    kind = "input"


class DataError(CignnError):
    exit_code = 3
    kind = "data"


class ParseError(DataError):
    kind = "parse"


class AlignmentError(DataError):
    kind = "alignment"


class InsufficientDataError(DataError):
    kind = "insufficient_data"


class DegenerateVarianceError(DataError):
    kind = "degenerate_variance"


class NumericError(CignnError, ArithmeticError):
    exit_code = 4
    kind = "numeric"


class DimensionError(NumericError, ValueError):
    """Operand shapes do not fit the operation."""

    kind = "dimension"


class ContractError(NumericError):
    kind = "contract"


class CignnWarning(UserWarning):
    pass
