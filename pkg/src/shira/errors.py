"""Exception hierarchy shared by every module."""


class ShiraError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ShiraError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ShiraError, ValueError):
    """An argument is outside its valid range."""


class NumericError(ShiraError, ArithmeticError):
    """A numerical procedure failed (non-finite data, no convergence)."""


class TrainingError(NumericError):
    """Training diverged."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FormatError(ShiraError, ValueError):
    """A serialized file is malformed. ``field`` names the offending part."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class CorruptAdapterError(FormatError):
    """Adapter contents are inconsistent with the tensor it targets."""
