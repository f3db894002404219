"""Exception hierarchy. Each family maps onto one CLI exit status."""


class HeadflowError(Exception):
    exit_code = 1


class ConfigError(HeadflowError, ValueError):
    """Shape mismatch, invalid hyperparameters, inconsistent wiring."""

    exit_code = 1


class InputError(HeadflowError, ValueError):
    """Bad or missing input data (files, calibration sets, non-finite targets)."""

    exit_code = 2


class NumericalError(HeadflowError, ArithmeticError):
    exit_code = 3


class DegenerateRowError(NumericalError):
    pass


class SingularSystemError(NumericalError):
    pass


class UndefinedMetricError(NumericalError):
    pass


class NormalizationError(NumericalError):
    """Anchors coincide, or a ratio denominator is not positive."""


class NotAchievableError(NumericalError):
    pass


class OracleError(HeadflowError):
    exit_code = 4


class OracleTransportError(OracleError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"{message}: {line!r}")
        self.line = line
