"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class EngineError(RuntimeError):
    """Tape misuse: double backward, non-scalar loss, nested tapes."""


class SchemaError(ValueError):
    """Keypoint schema is invalid or does not match the data."""


class DataError(ValueError):
    """Malformed dataset, annotation, or detection input."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or does not match the model."""


class ConfigError(ValueError):
    """Model or training configuration violates its invariants."""


class TrainAbort(RuntimeError):
    """Training stopped on a non-finite loss; carries a diagnostic dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
