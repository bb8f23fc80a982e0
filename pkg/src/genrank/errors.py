"""Exception hierarchy shared across the package."""


class GenrankError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(GenrankError):
    """Tensor shapes do not conform for the requested operation."""


class NumericError(GenrankError):
    """A computation produced NaN/Inf or left a function's domain."""


class InputError(GenrankError):
    """Caller-supplied data is invalid (bad ids, malformed files, over-length text)."""


class UsageError(GenrankError):
    """API misuse: empty batches, backward on a non-scalar, mismatched triples."""


class ConfigError(GenrankError):
    """Configuration values are inconsistent or infeasible."""
