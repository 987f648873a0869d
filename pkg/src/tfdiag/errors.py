"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with an operation."""


class ContractError(ValueError):
    """An operation's precondition does not hold."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(ValueError):
    """Invalid configuration or unknown option."""


class ParseError(ValueError):
    """Malformed input file."""
