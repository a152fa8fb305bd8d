"""Exception types raised across the package."""


class PhaseMemError(Exception):
    """Base class for package errors."""


class DimensionError(PhaseMemError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(PhaseMemError):
    """An operation was called outside its contract (wrong kind of input)."""


class NonFiniteStateError(PhaseMemError, FloatingPointError):
    """A recurrent memory state picked up NaN or Inf entries."""

    def __init__(self, message, layer=None, head=None):
        super().__init__(message)
        self.layer = layer
        self.head = head


class TrainingDivergedError(PhaseMemError, FloatingPointError):
    """Loss or gradients went non-finite during training."""

    def __init__(self, message, step, parameter=None):
        super().__init__(message)
        self.step = step
        self.parameter = parameter


class MetricUndefinedError(PhaseMemError, ValueError):
    """The input is too short (or otherwise degenerate) for the metric."""


class DensityMatrixError(PhaseMemError, ValueError):
    """A matrix violates the density-matrix invariants."""


class ParameterMatchError(PhaseMemError):
    """No real-valued configuration meets the parameter-count tolerance."""

    def __init__(self, message, nearest, relative_gap):
        super().__init__(message)
        self.nearest = nearest
        self.relative_gap = relative_gap


class CheckpointError(PhaseMemError, ValueError):
    """A checkpoint file is malformed."""


class InputError(PhaseMemError, ValueError):
    """User-supplied data is out of range or malformed."""
