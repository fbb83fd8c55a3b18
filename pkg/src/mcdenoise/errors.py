"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shape is invalid (empty, non-positive, or wrong parity)."""


class ContractError(ValueError):
    """Arguments violate an operation's preconditions."""


class ConfigError(ValueError):
    """A configuration (network, training, phantom spec) is inconsistent."""


class FormatError(ValueError):
    """A binary or text file does not match its expected format."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or would divide by zero."""
