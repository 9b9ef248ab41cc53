"""Exception hierarchy shared by every module."""


class AgbadaError(Exception):
    """Base class for all package errors."""


class DimensionError(AgbadaError, ValueError):
    """Incompatible or invalid tensor shapes."""


class StateError(AgbadaError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class ParameterError(AgbadaError, ValueError):
    """An argument is outside its valid range."""


class ValidationError(AgbadaError, ValueError):
    """Input data (label index, config) failed validation."""


class TrainingDivergedError(AgbadaError, ArithmeticError):
    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch, self.step, self.loss = epoch, step, loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, step {step}")


class WeightFileError(AgbadaError, IOError):
    """Malformed or incompatible weight file."""


class BadMagicError(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class ShapeConflictError(WeightFileError):
    pass


class ImageError(AgbadaError, IOError):
    """Unreadable, corrupt or unsupported image file."""
