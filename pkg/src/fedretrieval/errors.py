"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or an input that violates an operation's preconditions."""


class ParseError(ValueError):
    """Malformed input file."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class RangeError(ValueError):
    """An id outside its allowed range."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in parameters or gradients."""
