"""
Exception hierarchy for the library and the exit codes the CLI maps them to.
"""


class AmtlError(Exception):
    """Base class for every error raised by mtl_core."""

    exit_code = 1


class ConfigError(AmtlError, ValueError):
    """Invalid run configuration, model spec, dataset spec or input table."""

    exit_code = 2


class ModelSpecError(ConfigError):
    pass


class DatasetError(ConfigError):
    pass


class MetricTableError(ConfigError):
    pass


class DivergenceError(AmtlError, RuntimeError):
    """Training produced a non-finite loss."""

    exit_code = 3

    def __init__(self, message: str, epoch: int = -1):
        super().__init__(message)
        self.epoch = epoch


class ArtifactIOError(AmtlError, OSError):
    exit_code = 4


class StateError(AmtlError, RuntimeError):
    """Operation not allowed in the current pruner state (e.g. export before freeze)."""

    exit_code = 5


class DimensionError(AmtlError, ValueError):
    pass


class UnknownOpError(AmtlError, ValueError):
    pass


class DegenerateInputError(AmtlError, ValueError):
    pass


class NonFiniteError(AmtlError, FloatingPointError):
    pass


class TapeError(AmtlError, RuntimeError):
    pass


class InsufficientDataError(AmtlError, ValueError):
    pass


class ThresholdError(AmtlError, ValueError):
    pass


class TaskIndexError(AmtlError, IndexError):
    pass
