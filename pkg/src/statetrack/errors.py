"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented shape/size/range contract."""


class NumericError(ArithmeticError):
    """A computation left the finite floating-point domain."""


class ConfigError(ValueError):
    """A run configuration is malformed or contains unknown keys."""
