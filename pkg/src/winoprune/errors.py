"""Exception hierarchy shared across the package."""


class WinoError(Exception):
    """Base class for all package errors."""


class ShapeError(WinoError, ValueError):
    pass


class BoundsError(WinoError, IndexError):
    pass


class CapabilityError(WinoError, ValueError):
    """Requested transform or geometry is not supported."""


class NumericError(WinoError, ArithmeticError):
    pass


class TrainingError(NumericError):
    """Parameters diverged during an optimization step."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class ConsistencyError(WinoError, ValueError):
    """A forward cache does not match the tensors handed to a backward pass."""


class CorruptFormatError(WinoError, ValueError):
    pass


class InvariantError(WinoError, AssertionError):
    pass
