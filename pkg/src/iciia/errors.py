"""Exception types shared across the package."""


class IciiaError(Exception):
    """Base class for all library errors."""


class ShapeError(IciiaError):
    """Operand shapes do not conform."""


class ConfigError(IciiaError):
    """A configuration value is invalid or inconsistent."""


class UsageError(IciiaError):
    """An operation was called in an invalid state or with unusable inputs."""


class FormatError(IciiaError):
    """A data file is malformed."""


class ModeError(IciiaError):
    """An operation is not applicable in the current split mode."""
