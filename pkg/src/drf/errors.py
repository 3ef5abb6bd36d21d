"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: :class:`DataError` subclasses exit 3,
everything else derived from :class:`DRFError` exits 4.
"""


class DRFError(Exception):
    """Base class for all package errors."""


class DataError(DRFError):
    """Input data could not be used (bad file, bad schema, bad values)."""


class PoseParseError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class PoseSchemaError(PoseParseError):
    pass


class PoseValidationError(PoseParseError):
    pass


class PoseIOError(DRFError):
    """Filesystem failure while reading or writing a sequence file."""


class NormalizationError(DataError):
    def __init__(self, frame_index: int, message: str = "hip keypoints missing"):
        super().__init__(f"frame {frame_index}: {message}")
        self.frame_index = frame_index


class DegenerateHeightError(DataError):
    pass


class ShapeError(DRFError, ValueError):
    pass


class GuidanceError(DRFError):
    pass


class CheckpointError(DRFError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ProfileError(DataError):
    """Synthetic class profiles are inconsistent (e.g. overlapping ranges)."""
