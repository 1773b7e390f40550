"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid domain/problem configuration (e.g. p(d-2) >= d, unbounded B in low d)."""


class SingularDiagonalError(ValueError):
    """Green kernel requested on the diagonal where it is infinite (d >= 2)."""


class PartitionError(ValueError):
    """Partition is unusable: empty cell, or does not cover the required support."""


class DegenerateMemberError(ValueError):
    """A test-family member is identically zero where it must not be."""


class SizeError(ValueError):
    """Combinatorial input exceeds the configured size cap."""


class ConvergenceError(RuntimeError):
    """Iterative solver did not reach its tolerance.

    Carries the best iterate found so callers can inspect partial results.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
