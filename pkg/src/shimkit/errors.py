"""Exception hierarchy shared across shimkit."""


class ShimkitError(Exception):
    """Base class for all shimkit errors."""


class DimensionError(ShimkitError, ValueError):
    """Array shapes or channel counts do not line up."""


class DomainError(ShimkitError, ValueError):
    """Input is outside the domain of an operation (e.g. an empty mask)."""


class SpecError(ShimkitError, ValueError):
    """A configuration object violates one of its invariants."""


class NumericalError(ShimkitError, ArithmeticError):
    """An iterative procedure produced a non-finite value or broke an invariant."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DatasetError(ShimkitError, OSError):
    """Dataset or checkpoint on disk is unreadable, truncated or of the wrong version."""


class UsageError(ShimkitError, RuntimeError):
    """API called out of order."""


class IntegrityError(ShimkitError, ValueError):
    """A report is incomplete or internally inconsistent."""
