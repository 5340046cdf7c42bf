"""Exception hierarchy shared across the package."""


class FopcaError(Exception):
    """Base class for every error raised by this package."""


class InputError(FopcaError, ValueError):
    """Malformed or non-finite input data."""


class DimensionError(FopcaError, ValueError):
    """An index, rank or shape argument is out of range."""


class RankError(FopcaError, ValueError):
    """A matrix that must be nonsingular is numerically rank deficient."""


class SingularityError(FopcaError, ArithmeticError):
    """A quantity that must be inverted is numerically zero."""


class DegreesOfFreedomError(FopcaError, ValueError):
    """Too many regressors for the available observations."""


class PoleError(FopcaError, ValueError):
    """A rational function was evaluated at one of its poles."""


class UnsupportedRegimeError(FopcaError, ValueError):
    """Parameters fall outside the regime the theory covers (e.g. phi == 1)."""


class NumericError(FopcaError, ArithmeticError):
    """An iterative or bracketing routine failed to converge."""


class RequiresSyntheticError(FopcaError, ValueError):
    """A diagnostic needs ground truth (B, F, U) that real data lacks."""


class ExperimentError(FopcaError, RuntimeError):
    """A Monte Carlo experiment produced no usable replication."""


class WeakInstrumentError(FopcaError, ArithmeticError):
    """The residualized instrument is numerically uncorrelated with the treatment."""

    def __init__(self, message, first_stage_t=None, gamma_hat=None):
        super().__init__(message)
        self.first_stage_t = first_stage_t
        self.gamma_hat = gamma_hat


class SingularVarianceError(FopcaError, ArithmeticError):
    """The HC0 sandwich collapsed to zero (residuals vanish)."""

    def __init__(self, message, beta_hat=None, r_used=None):
        super().__init__(message)
        self.beta_hat = beta_hat
        self.r_used = r_used


class DegeneracyWarning(UserWarning):
    """Emitted when a tie or near-singularity forces a conventional choice."""
