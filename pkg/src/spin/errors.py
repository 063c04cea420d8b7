"""Exception taxonomy shared by every module.

The CLI maps these onto exit codes: validation-type errors exit 1,
format / I/O errors exit 2 (divergence is a run status, not an error).
"""


class SpinError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SpinError):
    """A configuration value is structurally impossible (bad divisibility,
    nonpositive eps, transform without the matching shared component...)."""


class ValidationError(SpinError):
    """Cross-object consistency failed (topology vs depth, spec sums...)."""


class DimensionError(ValidationError):
    """A tensor axis does not line up; the message names the axis."""


class InputError(SpinError):
    """Runtime data is out of range (labels, mismatched sample counts)."""


class UsageError(SpinError):
    """An operation was invoked in a state it does not support."""


class FormatError(SpinError):
    """A file does not follow its binary format; carries a byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ResourceError(SpinError):
    """A guard against unreasonably large computations tripped."""
