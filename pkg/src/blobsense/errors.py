"""Exception hierarchy shared across the package."""


class BlobsenseError(Exception):
    """Base class for all package errors."""


class DimensionError(BlobsenseError, ValueError):
    """Raised when tensor or image shapes are incompatible."""


class ConfigError(BlobsenseError, ValueError):
    """Raised for invalid configuration values."""


class ValidationError(BlobsenseError, ValueError):
    """Raised when persisted data (manifests, checkpoints) fails validation."""


class GraphError(BlobsenseError, RuntimeError):
    """Raised on misuse of the autodiff graph, e.g. a second backward pass."""


class RangeError(BlobsenseError, IndexError):
    """Raised when a coordinate lies outside the image."""
