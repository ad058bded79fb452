"""Exception types shared across the package."""


class NcaError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(NcaError):
    """Invalid configuration value or argument combination."""


class ShapeError(NcaError):
    """Tensor shapes do not satisfy an operation's contract."""


class GeometryError(NcaError):
    """Volume, patch, or tile geometry is inconsistent."""


class ContractError(NcaError):
    """An operation precondition was violated."""


class DegenerateBatchError(NcaError):
    """Batch statistics requested over fewer than two elements."""


class TrainingDivergedError(NcaError):
    """Loss or gradients became non-finite during training."""


class MemoryPlanError(NcaError):
    """The memory budget cannot accommodate a feasible tile plan."""


class CalibrationError(NcaError):
    """Quality-control calibration could not be fitted."""


class CorruptFileError(NcaError):
    """A persisted artifact failed integrity checks on load."""


class UnsupportedFormatError(NcaError):
    """File format or variant not handled by this reader."""
