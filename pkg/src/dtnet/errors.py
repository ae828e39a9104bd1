"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when array shapes or extents do not agree."""


class SingularMatrixError(ArithmeticError):
    """Raised when elimination meets a pivot below the singularity threshold."""

    def __init__(self, pivot_index: int, pivot_value: float):
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value
        super().__init__(
            f"matrix is singular: |pivot| = {abs(pivot_value):.3e} at index {pivot_index}"
        )


class ConfigurationError(ValueError):
    """Raised for invalid network, fiducial or transform configuration."""


class DataError(ValueError):
    """Raised for out-of-range labels or class ids."""


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for the given inputs."""
