"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class LengthError(ValueError):
    """A sequence is too short or too long for the requested operation."""


class EmptySourceError(ValueError):
    """Attention over zero keys."""


class CodeRangeError(ValueError):
    """A discrete code or slice index lies outside its valid range."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(ArithmeticError):
    """Loss became NaN or infinite."""


class CheckpointError(ValueError):
    """Malformed checkpoint or version mismatch."""


class ParseError(ValueError):
    """Malformed corpus input."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
