"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Array shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or a solver failed."""


class SchemaError(ValueError):
    """A data file does not match the expected column schema."""


class ConfigError(ValueError):
    """A run configuration is malformed. ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
