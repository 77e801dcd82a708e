"""Exception types shared across the pipeline."""


class SlicepropError(Exception):
    """Base class for all pipeline errors."""


class PersistenceError(SlicepropError):
    """I/O failure while reading or writing an artifact."""


class FormatError(SlicepropError):
    """On-disk artifact violates the documented format."""


class TruncationError(FormatError):
    """Payload size disagrees with the header's declared shape."""


class ShapeError(SlicepropError):
    """Array shapes are inconsistent with the operation's contract."""


class DegenerateSpecError(SlicepropError):
    """A phantom spec or mask admits no usable voxels."""


class EmptyMaskError(SlicepropError):
    """Operation requires a nonempty mask."""


class ConfigError(SlicepropError):
    """Invalid or unknown configuration."""


class StageDependencyError(SlicepropError):
    """A required upstream stage artifact is missing or mismatched."""


class NumericError(SlicepropError):
    """Training or inference produced a non-finite value."""


class RefinementError(SlicepropError):
    """A pseudo-label refiner failed."""
