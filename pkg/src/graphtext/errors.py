"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration value, file, or combination of settings."""


class DatasetError(ValueError):
    """Malformed dataset file; the message carries file name and line number."""


class NumericalError(RuntimeError):
    """Training or evaluation produced non-finite or degenerate values."""


class ZeroVarianceError(ValueError):
    """A correlation metric is undefined because one side has zero variance."""


class MissingClassError(ValueError):
    """A label class is absent from the classifier training half."""
