"""
Exception hierarchy for Skull MAE Suite.
Every error carries the CLI exit code it maps to.
"""


class SkullMAEError(Exception):
    """Base class for all pipeline errors"""
    exit_code = 2


# =============================================================================
# USAGE (exit 1)
# =============================================================================

class UsageError(SkullMAEError):
    """Bad command line or invalid configuration"""
    exit_code = 1


# =============================================================================
# DATA / FORMAT (exit 2)
# =============================================================================

class DataError(SkullMAEError, ValueError):
    """Input data cannot be processed"""
    exit_code = 2


class GeometryMismatch(DataError):
    """Two grids differ in dims, spacing or origin"""


class EmptyVolume(DataError):
    """Operation needs at least one foreground voxel"""


class BothEmpty(DataError):
    """Dice is undefined for two empty masks"""


class FormatError(DataError):
    """Volume file header is malformed or unsupported"""


class DimensionError(DataError):
    """Header dims disagree with payload size or expected dims"""


class VolumeIoError(DataError):
    """Underlying filesystem error while reading or writing a volume"""


class NoEligibleCenters(DataError):
    """No skull voxel lies above the z_min_frac threshold"""


class SynthesisFailed(DataError):
    """Every retry produced an empty defect"""


class DegenerateConfig(DataError):
    """Configuration produces an empty or invalid volume"""


class ShapeMismatch(DataError):
    """Tensor shapes are incompatible"""


# =============================================================================
# NUMERIC (exit 3)
# =============================================================================

class NumericError(SkullMAEError):
    """Numerical failure during training or checking"""
    exit_code = 3


class NonFiniteGradient(NumericError):
    """A gradient contains NaN or Inf"""


class GradcheckFailed(NumericError):
    """Finite-difference check exceeded tolerance"""
