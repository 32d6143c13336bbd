"""Exception hierarchy shared by every lczlab module."""


class LczLabError(Exception):
    """Base class for all library errors."""


class DimensionError(LczLabError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(LczLabError, ValueError):
    """A model, grouping or experiment configuration is inconsistent."""


class ParameterError(LczLabError, ValueError):
    """A scalar argument is outside its admissible range."""


class DataError(LczLabError, ValueError):
    """Input data violates a precondition (labels, targets, NaN inputs)."""


class StateError(LczLabError, RuntimeError):
    """An object is not in the state an operation requires."""


class NonFiniteError(LczLabError, FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class DegenerateVarianceError(LczLabError, ValueError):
    """Batch statistics cannot be estimated from a single element."""


class FormatError(LczLabError, ValueError):
    """An on-disk payload does not match its manifest."""


class CorruptionError(LczLabError, ValueError):
    """A payload checksum does not match its manifest."""


class DivergenceError(LczLabError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch, message=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message or f"non-finite loss at epoch {epoch}, batch {batch}")


class UndefinedMetricError(LczLabError, ValueError):
    """A metric is undefined for the given confusion matrix (e.g. zero total)."""
