"""Exception types shared across the package."""


class LitError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LitError):
    """Operands have incompatible shapes or dtypes."""


class NumericError(LitError):
    """A computation produced or received non-finite values."""


class ConfigError(LitError):
    """A model, run, or CLI configuration violates its invariants."""


class ValidationError(LitError):
    """Caller-supplied data failed a contract check."""


class StateError(LitError):
    """An operation was invoked in an invalid state."""
