"""Exception hierarchy shared by all modules."""


class HarmoniumError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(HarmoniumError, ValueError):
    """Unsupported or inconsistent configuration value."""


class ShapeError(HarmoniumError, ValueError):
    """Array shapes or sizes do not agree."""


class DataError(HarmoniumError, ValueError):
    """Input values are invalid (non-finite, out of range, unreadable)."""


class PreconditionError(HarmoniumError, ValueError):
    """An operation was called on inputs outside its domain."""


class BuildError(HarmoniumError):
    """Dataset construction failed for one or more entries."""

    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)


class FitError(HarmoniumError):
    """A statistical fit cannot be carried out on the given data."""


class TrainingError(HarmoniumError):
    """Training diverged or produced a non-finite loss."""
