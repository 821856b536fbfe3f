"""Exception hierarchy shared by every module."""


class AsyncDropError(Exception):
    """Base class for all package errors."""


class ConfigError(AsyncDropError, ValueError):
    """Invalid configuration value or key."""


class DimensionError(AsyncDropError, ValueError):
    """Array shapes do not agree."""


class NumericError(AsyncDropError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DegenerateMaskError(AsyncDropError):
    """A mask drops the whole model, or every unit of a layer."""


class ContractError(AsyncDropError):
    """A caller broke an interface precondition."""


class ParseError(AsyncDropError, ValueError):
    """Malformed input file. Carries the 1-based row/column when known."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class GenerationError(AsyncDropError):
    """Synthetic data generation hit its retry cap."""
