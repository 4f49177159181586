"""Exception hierarchy shared across the package.

The CLI maps these onto its exit codes: :class:`DataError` -> 2,
:class:`NumericalError` -> 3.
"""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (divergence, non-convergence, non-finite values)."""
