"""Exception types shared across the package.

The CLI maps these onto exit codes: invalid input 2, numeric failure 3.
"""


class WassGPError(Exception):
    pass


class InvalidInputError(WassGPError, ValueError):
    pass


class NumericError(WassGPError, ArithmeticError):
    pass


class IllConditionedError(NumericError):
    """Cholesky factorization failed even after jitter escalation."""

    def __init__(self, message, smallest_pivot=None, jitter=None):
        super().__init__(message)
        self.smallest_pivot = smallest_pivot
        self.jitter = jitter
