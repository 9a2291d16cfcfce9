"""Exception types raised across the package."""


class HbvarError(Exception):
    """Base class for all package errors."""


class ValidationError(HbvarError, ValueError):
    """Input data or configuration failed validation."""


class DimensionError(ValidationError):
    """Array shapes are inconsistent with the requested operation."""


class DegeneratePriorError(ValidationError):
    """A prior cannot be built, e.g. a region has zero sample variance."""


class UnsupportedModelError(ValidationError):
    """The requested summary is undefined for this model."""


class NumericalError(HbvarError, ArithmeticError):
    """A numerical routine failed (non-finite value, lost definiteness)."""


class ConditioningError(NumericalError):
    """A matrix is too ill-conditioned to factorize reliably."""

    def __init__(self, message, condition_number=None):
        if condition_number is not None:
            message = f"{message} (condition number {condition_number:.3e})"
        super().__init__(message)
        self.condition_number = condition_number


class ImproperPosteriorError(NumericalError):
    """Degrees of freedom or shape parameters leave a posterior improper."""


class InitializationError(NumericalError):
    """An optimizer or sampler could not evaluate its starting point."""


class UnreliableEstimateError(NumericalError):
    """A Monte Carlo estimate has too few effective samples to be trusted."""


class SpecInfeasibleError(HbvarError):
    """A simulation specification cannot be realized (e.g. never stationary)."""
