"""Exception and warning types raised across the package."""


class R2D2Error(Exception):
    """Base class for all package errors."""


class UnsupportedFamily(R2D2Error):
    """The requested operation has no closed form for this family."""


class OutOfSupport(R2D2Error, ValueError):
    """Density evaluated outside the distribution's support."""


class NumericFailure(R2D2Error, ArithmeticError):
    """A numerical routine could not reach its target (bracket, tolerance)."""


class DegenerateModel(R2D2Error, ZeroDivisionError):
    """Mean variance and noise variance are both zero."""


class FlatLink(R2D2Error, ZeroDivisionError):
    """mu'(beta0) = 0: the linear approximation is undefined."""


class NonFiniteObjective(R2D2Error, ArithmeticError):
    """Candidate parameters make the divergence integrand non-integrable."""


class OptimizationFailed(R2D2Error, RuntimeError):
    """No finite optimum found from any start."""


class LinkDomain(R2D2Error, ValueError):
    """Sample mean outside the domain of the link function."""


class DimensionMismatch(R2D2Error, ValueError):
    """Data dimensions do not match the model specification."""


class UnsupportedCombination(R2D2Error, ValueError):
    """Prior/model pairing the sampler does not define."""


class ChainDiverged(R2D2Error, RuntimeError):
    """Log posterior became non-finite during sampling."""

    def __init__(self, iteration, message=""):
        self.iteration = iteration
        super().__init__(message or f"log posterior non-finite at draw {iteration}")


class StudyFailed(R2D2Error, RuntimeError):
    """More than 10% of simulation replicates failed."""


class MissingColumn(R2D2Error, KeyError):
    """A schema column is absent from the CSV."""


class NonNumeric(R2D2Error, ValueError):
    """A numeric column contains non-numeric entries."""


class MissingValue(R2D2Error, ValueError):
    """A cell is empty/NaN (row and column reported)."""


class DegenerateColumn(R2D2Error, ValueError):
    """A covariate column has zero variance and cannot be standardized."""


class NoDispersionWarning(UserWarning):
    """Dispersion MLE hit the boundary of its parameter space."""


class SingularCorrelationWarning(UserWarning):
    """Spatial correlation matrix is numerically singular (duplicate sites)."""
