"""Exception types shared across stages."""


class GanOrConError(Exception):
    """Base class for every error raised by this package."""


class PairingError(GanOrConError):
    pass


class SchemaViolationError(GanOrConError):
    pass


class RemapError(GanOrConError):
    pass


class CheckpointError(GanOrConError):
    pass


class ContractViolation(GanOrConError, ValueError):
    pass


class NormalizationError(GanOrConError, ValueError):
    pass


class ConfigError(GanOrConError, ValueError):
    pass


class SpecError(GanOrConError, ValueError):
    pass


class ShapeError(GanOrConError, ValueError):
    pass


class MetricError(GanOrConError, ValueError):
    pass


class ProtocolError(GanOrConError, ValueError):
    pass


class EmptyPoolError(GanOrConError):
    pass


class DivergenceError(GanOrConError, RuntimeError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last weights that produced a finite loss, so the
    caller can persist them instead of losing the run.
    """

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step
