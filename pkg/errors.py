"""
Exception types shared by the reward-learning modules
"""


class MavrlError(Exception):
    """Base class for all errors raised by this package"""


class ConfigurationError(MavrlError, ValueError):
    """Invalid configuration value, unknown key or unknown environment name"""


class ShapeError(MavrlError, ValueError):
    """Array or tensor shapes do not line up"""


class EmptyDatasetError(MavrlError, ValueError):
    """An operation needs observations but received none"""


class DegenerateEnvironmentError(MavrlError, ValueError):
    """Normalization anchors coincide, so returns cannot be normalized"""


class NumericError(MavrlError, ArithmeticError):
    """Non-finite values where finite ones are required"""


class DivergenceError(NumericError):
    """Training produced a non-finite loss"""
