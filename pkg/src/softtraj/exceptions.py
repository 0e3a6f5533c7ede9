"""Exception types shared across the package."""


class SoftTrajError(Exception):
    """Base class for errors raised by this package."""


class ContractError(SoftTrajError, ValueError):
    """A caller violated an operation's preconditions."""


class ConfigurationError(SoftTrajError, ValueError):
    """Invalid or inconsistent configuration."""


class DomainError(SoftTrajError, ValueError):
    """A value lies outside the domain a risk grid is defined on."""


class ParseError(SoftTrajError, ValueError):
    """Malformed input file.  ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GridValidationError(SoftTrajError, ValueError):
    """A polygon grid does not partition its domain."""


class DivergenceError(SoftTrajError, RuntimeError):
    """Training produced a non-finite loss or parameter."""
