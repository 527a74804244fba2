"""Exception types shared across the package.

The command line maps these onto exit codes: format errors exit with 2,
configuration errors with 3 and anything else unexpected with 1.
"""


class LidarPassError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LidarPassError, ValueError):
    """An array argument has the wrong rank, length or dtype family."""


class ValidationError(LidarPassError, ValueError):
    """A value is structurally fine but violates a documented contract."""


class FormatError(LidarPassError, ValueError):
    """A byte stream or text document cannot be parsed."""


class ConfigError(ValidationError):
    """A run configuration failed validation."""


class VoxelLookupError(LidarPassError, LookupError):
    """A voxel key required by an operation is missing from the grid."""
