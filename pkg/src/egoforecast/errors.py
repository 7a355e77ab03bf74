"""Exception hierarchy shared by every egoforecast module."""


class EgoForecastError(Exception):
    """Base class for all package errors."""


class DimensionError(EgoForecastError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class UsageError(EgoForecastError):
    """An API was called in a state or with arguments it does not support."""


class ConfigError(EgoForecastError, ValueError):
    """A network or run configuration is inconsistent."""


class FormatError(EgoForecastError):
    """A file on disk is truncated, corrupted or belongs to another config."""


class ValidationError(EgoForecastError, ValueError):
    """Input data violates a physical invariant (e.g. non-orthonormal rotation)."""


class InvalidObservationError(EgoForecastError, ValueError):
    """A frame lacks the keypoints needed to derive location and scale."""


class InvalidSampleError(EgoForecastError, ValueError):
    """A window of frames cannot be turned into a training sample."""


class DegenerateDataError(EgoForecastError, ValueError):
    """Statistics cannot be computed (e.g. a zero-variance channel)."""
