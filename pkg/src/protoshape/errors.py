"""Exception types shared across the toolkit."""


class ProtoshapeError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(ProtoshapeError):
    """Array or mesh shapes are incompatible with the requested operation."""


class ParameterError(ProtoshapeError):
    """An argument value is outside its valid range."""


class EmptyInputError(ProtoshapeError):
    """An operation that requires at least one element received none."""


class DegenerateBatchError(ProtoshapeError):
    """Batch statistics requested over fewer than two samples."""


class TopologyError(ProtoshapeError):
    """Mesh connectivity violates a structural requirement."""


class DegenerateFaceError(TopologyError):
    """A triangle has (numerically) zero area."""


class NumericError(ProtoshapeError):
    """A non-finite value appeared where finite values are required."""


class DataError(ProtoshapeError):
    """A file or directory does not match the expected on-disk format."""


class CheckpointError(ProtoshapeError):
    """A checkpoint cannot be read back consistently."""
