"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent or has an invalid value."""


class CorruptionError(ValueError):
    """A checkpoint file is truncated, has a bad header, or fails validation."""


class DatasetError(ValueError):
    """A dataset file is missing or malformed."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
