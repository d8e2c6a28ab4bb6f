"""
Exception types shared across the package.

Validation problems stay ValueErrors so callers that only know the builtin
types still catch them; the subclasses let the CLI pick an exit code.
"""


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


class DataFormatError(ValueError):
    """Malformed dataset file content."""

    def __init__(self, message: str, line: int = 0):
        self.line = line
        if line:
            message = f"line {line}: {message}"
        super().__init__(message)


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""


class ConvergenceError(RuntimeError):
    """A fit did not converge and the caller asked for a hard failure."""
