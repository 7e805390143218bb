"""Exception hierarchy shared across the package."""


class SlowaveError(Exception):
    """Base class for all slowave errors."""


class EdfFormatError(SlowaveError):
    """Malformed, truncated, or unsupported EDF/CSV content."""


class FeatureError(SlowaveError):
    """Degenerate input to a spectral-feature computation (e.g. zero power)."""


class ModelError(SlowaveError):
    """Invalid model state or training input (single-class labels, NaNs, ...)."""


class LeakageError(SlowaveError):
    """A cross-validation plan places test data inside a training pool."""


class ConfigError(SlowaveError):
    """Invalid run configuration (unknown keys, bad values, missing files)."""
