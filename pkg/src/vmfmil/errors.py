"""Exception hierarchy shared across the package."""


class VmfMilError(Exception):
    """Base class for all library errors."""


class DataError(VmfMilError):
    """Malformed or inconsistent on-disk data (bad magic, truncation, schema)."""


class ValidationError(DataError):
    """Input violates a documented invariant (e.g. unnormalized feature row)."""


class DimensionMismatchError(ValidationError):
    """Mixed feature dimensions where a single d is required."""


class DegenerateResultantError(VmfMilError):
    """Weighted resultant vector too small to define a direction."""


class CapacityError(VmfMilError):
    """Dataset cannot supply the requested episode (not enough images/classes)."""


class ProtocolError(VmfMilError):
    """Evaluation protocol violated (e.g. CorLoc image without ground truth)."""
