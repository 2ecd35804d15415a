"""Exception hierarchy shared by the library and the CLI."""


class CpmpcError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigurationError(CpmpcError, ValueError):
    exit_code = 2


class CalibrationInfeasibleError(CpmpcError):
    """Raised when the conformal quantile lands on the appended infinity."""

    exit_code = 3

    def __init__(self, message, min_calib_size=None):
        super().__init__(message)
        self.min_calib_size = min_calib_size


class NotCertifiableError(CpmpcError):
    """A constraint was requested on an infinite prediction radius."""

    exit_code = 3


class PredictionError(CpmpcError, ArithmeticError):
    def __init__(self, message, tau=None):
        super().__init__(message)
        self.tau = tau


class MpcInfeasibleError(CpmpcError):
    """No candidate passed the exact feasibility certificate."""

    exit_code = 4

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}
