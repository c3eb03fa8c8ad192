"""Error taxonomy shared by every module in the package."""


class DimensionError(ValueError):
    """Operand shapes, ranks, or dtypes do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """A configuration value is structurally invalid (non-divisible heads, bad rank, ...)."""


class NumericError(ArithmeticError):
    """Non-finite values reached an operation that requires finite input."""


class StateError(RuntimeError):
    """A cached intermediate does not match the layer or gradient it is used with."""


class TensorFileError(ValueError):
    """A tensor file or archive manifest is malformed."""
