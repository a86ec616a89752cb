"""Exception hierarchy shared across the package.

The CLI maps :class:`ValidationError` to exit code 2 and
:class:`NumericalError` to exit code 3.
"""


class ValidationError(ValueError):
    """Input data or configuration violates a documented invariant."""


class AlignmentError(ValidationError):
    """Timestamps differ between input files."""


class ComplementarityError(ValidationError):
    """Both directions of one interconnector carry positive flow."""


class TransformDomainError(ValidationError):
    """A price lies at or below the floor offset."""


class DegenerateCovariateError(ValidationError):
    """Normalization bounds have max == min."""


class NumericalError(RuntimeError):
    """A numerical routine failed to converge or produced non-finite values."""
