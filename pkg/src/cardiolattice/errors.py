"""Exception hierarchy.

Three base classes map onto the CLI exit codes: configuration problems
(exit 2), data problems (exit 3), and internal invariant violations
(exit 4). Every concrete error subclasses one of them.
"""

from __future__ import annotations


class CardioLatticeError(Exception):
    """Base class for all package errors."""

    exit_code = 4


class ConfigError(CardioLatticeError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(CardioLatticeError):
    """Invalid, malformed, or degenerate input data."""

    exit_code = 3


class InvariantViolationError(CardioLatticeError):
    """An internal consistency check failed."""

    exit_code = 4


# volume I/O
class MalformedHeaderError(DataError):
    """Volume header is missing, unparsable, or violates its schema."""


class DimensionMismatchError(DataError):
    """Payload larger than the header promises, or shapes disagree."""


class TruncatedPayloadError(DataError):
    """Payload holds fewer elements than the header promises."""


# volume geometry / preprocessing
class GeometryMismatchError(DataError):
    """Two volumes that must share dims and spacing do not."""


class FewerThanTwoVoxelsError(DataError):
    """A mask region is too small for axis estimation."""


class EmptyMaskError(DataError):
    """No foreground voxels where some are required."""


# severity
class DegenerateMaskError(DataError):
    """Mask region unusable for the requested biomarker."""


class ZeroEDVolumeError(DataError):
    """End-diastolic cavity volume is zero; ejection fraction undefined."""


class EmptyInputError(DataError):
    """Too few values to fit percentile statistics."""


# anchors
class MissingHealthyError(DataError):
    """Cohort lacks a healthy subject for baseline anchoring."""


class MissingPathologyError(DataError):
    """Cohort lacks subjects for a requested pathology."""


# trajectory / phantom
class PhantomExceedsGridError(DataError):
    """Phantom geometry does not fit inside the target grid."""


class ZeroVectorError(DataError):
    """Spherical interpolation requires nonzero endpoint vectors."""


class NonMonotoneMappingError(DataError):
    """Severity mapping could not be made invertible."""


class NTooSmallError(ConfigError):
    """Resampling needs at least two target severities."""


# interleaved validation
class EmptyCohortError(DataError):
    """Cannot partition an empty cohort."""


class StepTooCoarseError(DataError):
    """Granularity stride leaves too few samples to split."""


# lattice
class EmptySetError(ConfigError):
    """Lattice axes must be nonempty."""


class EmptyTrainSetError(DataError):
    """An expert cannot be trained without training samples."""


class MissingExternalMapError(DataError):
    """External expert has no stored probability map for a test case."""


# activation
class EmptyTableError(DataError):
    """Expert selection requires a nonempty score table."""


# metrics
class ZeroVarianceError(DataError):
    """Correlation undefined for a constant-valued input."""


class EmptySurfaceError(DataError):
    """Surface distance undefined when a label region is empty."""


class TooSmallGridError(DataError):
    """Finite differences need at least two voxels per axis."""
