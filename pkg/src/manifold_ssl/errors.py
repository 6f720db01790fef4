"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateError(ValueError):
    """Input is degenerate for the requested operation (zero norm, empty row, ...)."""


class DomainError(ValueError):
    """Value outside the mathematical domain of an operation."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


class ConfigError(ValueError):
    """Invalid configuration or precondition on sizes."""


class ParseError(ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NonFiniteError(FloatingPointError):
    """A loss term or gradient became NaN/Inf."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name
