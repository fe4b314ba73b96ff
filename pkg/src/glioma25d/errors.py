"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: config errors -> 2, data errors -> 3,
numeric failures -> 4.
"""


class Glioma25DError(Exception):
    exit_code = 1


class ConfigError(Glioma25DError, ValueError):
    exit_code = 2


class DataError(Glioma25DError, ValueError):
    exit_code = 3


class DegenerateInputError(DataError):
    """Input has no spread (e.g. constant intensities, zero std)."""


class StratificationError(DataError):
    pass


class NumericError(Glioma25DError, ArithmeticError):
    exit_code = 4
