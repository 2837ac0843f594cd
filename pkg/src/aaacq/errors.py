"""Exception types shared across the package."""


class AaacqError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(AaacqError):
    """Malformed input container (bad header, bad offsets, bad magic)."""


class UnsupportedDtypeError(AaacqError):
    """Tensor dtype outside the supported set."""


class PairingError(AaacqError):
    """Weight and calibration tensors cannot be paired for a layer."""


class ValidationError(AaacqError):
    """Invalid argument values or inconsistent shapes."""


class LayoutError(AaacqError):
    """Group sizes incompatible with the tensor layout."""


class UnsupportedConfigError(AaacqError):
    """Configuration combination the format does not support."""


class CorruptionError(AaacqError):
    """Packed byte stream is truncated or fails integrity checks."""


class UndefinedGapError(AaacqError):
    """Gap recovery is undefined because the baseline equals full precision."""
