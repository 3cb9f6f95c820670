"""Exception types shared across the toolkit."""


class RprlocError(Exception):
    """Base class for all toolkit errors."""


class GeometryError(RprlocError):
    """Invalid geometric input (non-positive spacing, NaN coordinates, ...)."""


class DegenerateVolumeError(RprlocError):
    """A volume has no usable foreground."""


class DegenerateMaskError(RprlocError):
    """An organ mask is empty."""


class UndefinedSimilarityError(RprlocError):
    """A similarity score is undefined for the given inputs
    (zero-norm patch for cosine, zero-variance patch for NCC)."""


class ConfigError(RprlocError):
    """A run configuration failed validation."""


class DataError(RprlocError):
    """Missing or malformed on-disk data."""


class TrainingDivergedError(RprlocError):
    """Training aborted because the loss became non-finite."""
