"""Exception types raised across the engine."""


class FusedTrainError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FusedTrainError):
    """An op received operands whose extents do not fit its contract."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class GraphBuildError(FusedTrainError):
    """The computation graph violates a structural rule (e.g. weight sharing)."""


class TapeStateError(FusedTrainError):
    """forward/backward called out of order on a tape."""


class AccountingError(FusedTrainError):
    """A ledger balance would go negative: some allocation was double-freed."""


class NonFiniteLossError(FusedTrainError):
    """The loss became NaN/inf outside of scaled half-precision training."""


class ScaleUnderflowError(FusedTrainError):
    """The dynamic loss scale fell below its minimum; training has diverged."""


class ConfigError(FusedTrainError):
    """An invalid model, task, optimizer, or run configuration."""
