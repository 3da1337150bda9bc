"""Exception types shared across the package."""


class MsptError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MsptError):
    """Operands have incompatible shapes or dtypes."""


class NumericError(MsptError):
    """A numeric contract was violated (NaN input, divergent loss, failed check)."""


class TapeStateError(MsptError):
    """The autodiff tape was used out of order."""


class ConfigError(MsptError):
    """A configuration value is invalid or inconsistent."""


class DataFormatError(MsptError):
    """A dataset or checkpoint file is malformed, truncated, or corrupt."""


class GenerationError(MsptError):
    """A synthetic data generator failed its own validity checks."""
