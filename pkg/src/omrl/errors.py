"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataFormatError -> 3,
NumericError -> 4.
"""


class ContractViolation(ValueError):
    """An operation was called with arguments that violate its contract."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataFormatError(RuntimeError):
    """Corrupt, truncated, or mismatched on-disk data."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ArithmeticError):
    """Non-finite values encountered during numeric computation."""
