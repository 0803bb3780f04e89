"""Exception types shared across the package.

Solver non-convergence is reported through result flags, not exceptions;
the classes here cover conditions where no usable result exists.
"""


class IflabError(Exception):
    """Base class for all package errors."""


class NonFiniteError(IflabError):
    """A computation produced NaN or infinity (divergent training, solver breakdown)."""


class IndefiniteDetected(IflabError):
    """Conjugate gradient hit a direction p with p'Ap <= 0: the operator is not positive definite."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report  # partial SolveReport up to the failing iteration


class DimTooLarge(IflabError):
    """Dense-path guard tripped: the operation is restricted to desk-scale dimensions."""


class DegenerateInput(IflabError):
    """Statistics input without enough variation or samples to be meaningful."""


class DegenerateCorrelation(DegenerateInput):
    """Correlation undefined because one side is (numerically) constant."""


class BadConfig(IflabError):
    """Invalid configuration value or file."""


class BadInput(IflabError):
    """Invalid direct numeric input (e.g. negative Gronwall coefficients)."""


class InsufficientPool(IflabError):
    """Sampling pool smaller than requested; carries the fallback set actually used."""

    def __init__(self, message, available=None):
        super().__init__(message)
        self.available = available


class AlreadyCorrect(IflabError):
    """Correction job rejected: the test point is not mispredicted at the checkpoint."""


class MissingArtifact(IflabError):
    """A referenced run artifact (dataset, checkpoint, CSV) does not exist."""


class KrylovBreakdownWarning(UserWarning):
    """Krylov subspace degenerated before the requested number of pairs was found."""
