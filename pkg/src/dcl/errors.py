"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataFormatError(ValueError):
    """A persisted array or manifest does not match the container format."""


class DataCorruptionError(DataFormatError):
    """A persisted blob is truncated or otherwise unreadable."""


class ShapeError(ValueError):
    """An array has the wrong shape for the configured dimensions."""


class NumericError(FloatingPointError):
    """Non-finite values encountered where finite ones are required."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt or incompatible with the configuration."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""
