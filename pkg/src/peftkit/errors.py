"""Exception hierarchy shared by all peftkit modules.

The CLI maps these onto distinct exit codes (see peftkit.cli).
"""


class ShapeError(ValueError):
    """Tensor/array shapes do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration value or malformed config file."""


class DataError(RuntimeError):
    """Dataset is missing, empty, unreadable, or inconsistent."""


class NumericError(ArithmeticError):
    """Non-finite values or numerically singular state."""


class ContractError(RuntimeError):
    """An API was used outside its documented state contract."""


class CheckpointError(RuntimeError):
    """Checkpoint file is truncated, corrupt, or version-incompatible."""
