"""statetrack: a state-propagating selective-scan tracker and its lab."""

from .errors import ConfigError, ContractError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "NumericError", "__version__"]
