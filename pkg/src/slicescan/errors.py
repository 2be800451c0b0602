"""Exception types. Each carries a short ``category`` used by the CLI error prefix."""


class SliceScanError(Exception):
    category = "internal"


class ShapeError(SliceScanError, ValueError):
    category = "shape"


class DivisibilityError(ShapeError):
    category = "divisibility"


class ConfigError(SliceScanError, ValueError):
    category = "config"


class DataError(SliceScanError, ValueError):
    category = "data"


class ChecksumError(DataError):
    category = "checksum"


class CheckpointError(SliceScanError, ValueError):
    category = "checkpoint"


class DivergenceError(SliceScanError, FloatingPointError):
    category = "divergence"


class NonFiniteError(SliceScanError, FloatingPointError):
    category = "nonfinite"


class SearchError(SliceScanError, ValueError):
    category = "search"


class GradientCheckError(SliceScanError):
    category = "gradcheck"
