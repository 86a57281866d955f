"""Exception types shared across the package."""


class GraphError(RuntimeError):
    """Misuse of the autograd graph, e.g. a second backward over a released graph."""


class DimensionError(ValueError):
    """Operand shapes are inconsistent."""


class ConfigError(ValueError):
    """Invalid configuration (even mask size, window larger than the image, ...)."""


class FloError(ValueError):
    """Base class for malformed .flo files."""


class FloMagicError(FloError):
    """The leading magic float is not 202021.25."""


class FloTruncatedError(FloError):
    """The payload is shorter than width * height * 2 floats."""


class FloDimensionError(FloError):
    """Width/height are non-positive or implausibly large."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


class TrainingDivergedError(RuntimeError):
    """Non-finite loss during training; the message carries diagnostics."""
