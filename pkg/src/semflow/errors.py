"""Exception hierarchy shared by every module."""


class SemflowError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(SemflowError):
    """Tensor extents do not satisfy an operation's shape contract."""


class ConfigError(SemflowError):
    """Invalid configuration value or layer hyper-parameter."""


class DataError(SemflowError):
    """Invalid data contents (non-finite values, out-of-range labels)."""


class NonFiniteError(DataError):
    """An operation produced NaN or Inf."""


class GradcheckError(SemflowError):
    """Analytic or numeric gradient is not finite."""


class DegenerateBatchError(SemflowError):
    """A loss was asked to average over zero valid pixels."""


class UndefinedMetricError(SemflowError):
    """A metric has no defined value for the given state."""


class CheckpointError(SemflowError):
    """Base class for checkpoint read/write failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointNameError(CheckpointError):
    pass
