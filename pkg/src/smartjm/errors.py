"""Exception types shared across the package."""


class SmartjmError(Exception):
    """Base class for all package errors."""


class ConfigError(SmartjmError):
    """Invalid trial design or study configuration."""


class DataError(SmartjmError):
    """Malformed subject data (records or files)."""


class EvaluationError(SmartjmError):
    """A model quantity could not be evaluated (domain or overflow)."""


class InitializationError(SmartjmError):
    """Start values could not be derived from the data."""


class FitError(SmartjmError):
    """Optimization failed in a non-recoverable way."""


class DegenerateContrastError(SmartjmError):
    """A contrast variance is too small to standardize."""
