"""Shared exception types.

Exit-code mapping used by the CLI: usage errors -> 1, data/contract
violations -> 2, numerical failures -> 3.
"""


class SparseFactorError(Exception):
    """Base class for package errors."""


class InvalidArgumentError(SparseFactorError, ValueError):
    """Bad argument values (negative thresholds, empty splits, ...)."""


class ShapeError(SparseFactorError, ValueError):
    """Dimension mismatch between model pieces and data."""


class ContractViolationError(SparseFactorError):
    """A caller crossed a stop-gradient boundary or fed disallowed inputs."""


class NumericalFailureError(SparseFactorError, ArithmeticError):
    """Non-finite values encountered mid-computation.

    ``iterate`` carries the refinement step index when the failure occurred
    inside the proximal loop.
    """

    def __init__(self, message: str, iterate: int | None = None):
        super().__init__(message)
        self.iterate = iterate


class DegenerateTestError(SparseFactorError):
    """A statistical test cannot be computed (zero variance, no movers)."""
