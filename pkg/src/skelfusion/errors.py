"""Exception hierarchy shared by the library and the CLI exit codes."""


class SkelfusionError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class DataValidationError(SkelfusionError, ValueError):
    """Input data violates a structural invariant (file format, shapes, ids)."""

    exit_code = 2


class FormatMixError(DataValidationError):
    """Techniques producing different pose formats were combined in one model."""


class TrainingDivergedError(SkelfusionError, ArithmeticError):
    """A non-finite loss or activation appeared during training or inference."""

    exit_code = 3


class CacheIntegrityError(SkelfusionError):
    """Cached partial outputs do not match their manifest."""

    exit_code = 4
