"""Exception types shared across the package."""


class GGSfMError(Exception):
    """Base class for all package-specific errors."""


class CheiralityError(GGSfMError):
    """A point lies at or behind the camera plane (depth <= 0)."""


class DimensionMismatch(GGSfMError):
    """Two containers that must share view count / grid shape do not."""


class ThresholdOrderError(GGSfMError):
    """Confidence thresholds violate the required strict ordering."""


class DegenerateProblem(GGSfMError):
    """A bundle adjustment problem without enough structure to solve."""


class NonFiniteCost(GGSfMError):
    """The optimizer encountered a NaN or infinite objective."""


class DegenerateGeometry(GGSfMError):
    """Triangulation geometry does not determine a finite 3D point."""


class DegenerateConfiguration(GGSfMError):
    """Point sets too small or too flat for similarity estimation."""


class InsufficientInliers(GGSfMError):
    """Robust alignment found fewer inliers than required."""


class AlignmentFailed(GGSfMError):
    """Metric computation could not align prediction to ground truth."""


class NoValidPixels(GGSfMError):
    """No pixel is valid in both prediction and ground truth."""


class EmptyCloud(GGSfMError):
    """An operation requires at least two guide points."""


class BudgetUnsatisfiable(GGSfMError):
    """Patch extraction cannot satisfy the point budget at any width."""


class FormatError(GGSfMError):
    """A file does not conform to the expected on-disk format."""


class ConfigError(GGSfMError):
    """Invalid or inconsistent configuration values."""
