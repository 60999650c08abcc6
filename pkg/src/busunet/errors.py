"""Exception hierarchy shared by every subsystem."""


class BusuError(Exception):
    """Base class for all library errors."""


class ShapeError(BusuError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ParameterError(BusuError, ValueError):
    """An argument value is outside its permitted range."""


class UsageError(BusuError, ValueError):
    """An operation was invoked in a state where it is undefined."""


class ConfigError(BusuError, ValueError):
    """An architecture or training configuration violates its invariants."""


class IngestionError(BusuError):
    """A dataset directory is missing files or holds inconsistent rasters."""


class FormatError(BusuError):
    """A serialized tensor or checkpoint is corrupt or unreadable."""


class PrecisionMismatchError(FormatError):
    """A checkpoint was written in a different precision than requested."""
