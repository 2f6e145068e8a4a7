"""Exception hierarchy shared across the package."""


class SWMediateError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SWMediateError, ValueError):
    """Invalid design, scenario or command configuration."""


class DataValidationError(SWMediateError, ValueError):
    """A dataset failed validation; ``diagnostics`` holds the findings."""

    def __init__(self, message, diagnostics=()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


class RankDeficiencyError(SWMediateError, ValueError):
    """The fixed-effects design matrix is not of full column rank."""


class FitError(SWMediateError, RuntimeError):
    """A mixed model could not be fitted."""


class SeparationError(FitError):
    """Logistic model coefficients diverge (complete or quasi separation)."""


class DomainError(SWMediateError, ValueError):
    """An estimand was requested outside its eligible (period, exposure) region."""


class NumericDegeneracyError(SWMediateError, ArithmeticError):
    """A probability collapsed onto 0 or 1 so its logit is not finite."""


class CalibrationError(FitError):
    """Coefficient calibration did not reach the target effects."""
