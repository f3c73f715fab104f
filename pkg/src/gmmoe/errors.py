"""Error taxonomy shared by the library and the CLI exit-code contract."""


class GMMoEError(Exception):
    """Base class for all library errors."""


class ConfigurationError(GMMoEError):
    """Invalid configuration value, toggle combination, or channel mismatch."""


class ShapeError(GMMoEError):
    """Tensor shape violates an operation's contract."""


class InputTooSmallError(ShapeError):
    """Spatial dimensions too small for the requested operation."""


class DataError(GMMoEError):
    """Dataset-level failure (layout, pairing, integrity, decoding)."""


class PairingError(DataError):
    """A low/ground-truth pair could not be formed."""


class IntegrityError(DataError):
    """Paired images disagree on pixel dimensions or content constraints."""


class DecodeError(DataError):
    """An image file could not be decoded."""


class CheckpointError(GMMoEError):
    """Checkpoint container is malformed, truncated, or version-incompatible."""


class NumericError(GMMoEError):
    """Non-finite values encountered during optimization."""
