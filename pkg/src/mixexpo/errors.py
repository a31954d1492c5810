"""Exception types shared across the package."""


class MixexpoError(Exception):
    """Base class for all package-specific errors."""


class DecodeError(MixexpoError):
    """An image file could not be decoded into the supported format."""


class ConfigError(MixexpoError):
    """A configuration file or value is invalid."""


class DataError(MixexpoError):
    """Dataset layout or contents are unusable."""


class CheckpointError(MixexpoError):
    """A checkpoint file is corrupt, incomplete, or incompatible."""


class NumericError(MixexpoError):
    """Training produced a non-finite loss or gradient."""
