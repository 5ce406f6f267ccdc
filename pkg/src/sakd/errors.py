"""Exception hierarchy shared across the package."""


class SakdError(Exception):
    """Base class for every error raised by sakd."""


class ShapeError(SakdError, ValueError):
    pass


class NumericError(SakdError, ArithmeticError):
    pass


class ConfigError(SakdError, ValueError):
    pass


class InvariantError(SakdError, AssertionError):
    pass


class UsageError(SakdError, TypeError):
    pass


class CheckpointError(SakdError):
    """Raised for unreadable, incompatible or corrupted checkpoints."""
