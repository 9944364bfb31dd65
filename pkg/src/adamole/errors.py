"""Exception types shared across the package."""


class AdamoleError(Exception):
    pass


class ShapeError(AdamoleError, ValueError):
    """Operand shapes do not conform."""


class ConfigError(AdamoleError, ValueError):
    """Invalid construction or run parameters."""


class StateError(AdamoleError, RuntimeError):
    """Operation called out of order, e.g. backward before forward."""


class NumericError(AdamoleError, ArithmeticError):
    """Non-finite values where finite ones are required."""
