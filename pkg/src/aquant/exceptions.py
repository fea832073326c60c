"""Exception types shared across the toolkit."""


class AquantError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(AquantError, ValueError):
    """A tensor argument has the wrong shape or rank."""


class DegenerateWeightError(AquantError, ValueError):
    """Raised when |w + dw| is too small for the analytic border."""


class DivergenceError(AquantError, RuntimeError):
    """Calibration produced a non-finite loss."""


class StorageError(AquantError):
    """Base class for container load failures."""


class FormatVersionError(StorageError):
    """Container was written with an unsupported format version."""


class ChecksumError(StorageError):
    """A blob's checksum does not match its manifest entry."""


class TruncatedBlobError(StorageError):
    """A blob file is shorter than the manifest says it should be."""
