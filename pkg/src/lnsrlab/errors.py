"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


class ValidationError(ValueError):
    """Raised when a config object contains invalid field values."""
