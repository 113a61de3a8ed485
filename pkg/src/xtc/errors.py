"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class InputError(ValueError):
    """Model inputs are out of range (token ids, sequence length)."""


class CodecError(ValueError):
    """A value cannot be represented by the requested packed format."""


class FormatError(ValueError):
    """A checkpoint or packed segment could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigurationError(ValueError):
    """Invalid configuration; ``path`` names the offending field when known."""

    def __init__(self, message, path=None):
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path


class RangeError(IndexError):
    """A step index falls outside the schedule."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class TrainingDiverged(RuntimeError):
    """Raised when the training objective becomes non-finite."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}
