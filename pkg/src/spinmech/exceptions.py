class SpinMechError(Exception):
    """Base class for all toolkit errors."""


class NumericalError(SpinMechError):
    """A numerical procedure failed (non-convergence, ill-conditioning)."""


class RankDeficiencyError(NumericalError):
    """A linear inversion is not uniquely solvable.

    ``null_space`` holds an orthonormal basis of the offending directions
    (columns), when it is known.
    """

    def __init__(self, message, null_space=None):
        super().__init__(message)
        self.null_space = null_space


class UnidentifiableError(NumericalError):
    """Fit parameters cannot be determined from the supplied data."""

    def __init__(self, message, parameters=()):
        super().__init__(message)
        self.parameters = tuple(parameters)


class LabelingError(NumericalError):
    """No eigenvector is dominantly |0>, so f_+/f_- cannot be assigned."""


class NonInvertibleError(SpinMechError):
    """The forward map has zero responsivity at this configuration."""


class ElasticLimitError(SpinMechError):
    """Applied load exceeds the configured elastic-limit guard."""


class LinearRegimeError(SpinMechError):
    """A spin signal is too large for the first-order response model."""
