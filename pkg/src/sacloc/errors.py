"""Exception hierarchy shared by every module."""


class SACError(Exception):
    """Base class for contract violations raised by this package."""


class InvalidShapeError(SACError, ValueError):
    pass


class ContractError(SACError):
    """A documented precondition was not met (e.g. non-scalar loss)."""


class InvalidInstanceError(SACError, ValueError):
    """An assignment instance violates its mass or range invariants."""


class NumericalError(SACError, ArithmeticError):
    pass


class GenerationError(SACError):
    pass


class ConfigError(SACError):
    pass


class FormatError(SACError):
    """A file does not follow the expected binary or JSON layout."""
