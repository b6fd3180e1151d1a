"""Exception hierarchy shared across the package."""


class MotokError(Exception):
    """Base class for all package errors."""


class ShapeError(MotokError, ValueError):
    """Tensor extents do not line up; message names the offending axis."""


class ArgumentError(MotokError, ValueError):
    """An argument value is out of its allowed domain."""


class ConfigError(MotokError, ValueError):
    """A model/run configuration is inconsistent."""


class StateError(MotokError, RuntimeError):
    """An operation was called in a state where it is undefined."""


class DataError(MotokError, ValueError):
    """Input data (tokens, files) is malformed or out of range."""


class TrainingError(MotokError, RuntimeError):
    """Training hit a non-recoverable numeric condition."""
