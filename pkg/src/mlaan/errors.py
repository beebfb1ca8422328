"""Exception types shared across the package."""


class MlaanError(Exception):
    """Base class for all package errors."""


class ShapeError(MlaanError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(MlaanError):
    """Invalid configuration document, value, or operation precondition."""


class GraphError(MlaanError):
    """Misuse of the computation graph (non-scalar loss, cross-graph tensors)."""


class StateError(MlaanError):
    """A stateful component was used before it was initialized."""


class DataError(MlaanError):
    """A dataset file is malformed, truncated, or inconsistent."""


class CheckpointError(MlaanError):
    """A checkpoint file is corrupt, incompatible, or fails verification."""


class TrainingDiverged(MlaanError):
    """Training produced non-finite losses and was aborted."""
