"""Exception hierarchy shared by all refseg modules."""


class RefsegError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(RefsegError):
    """A model or training configuration violates an invariant."""


class ShapeError(RefsegError):
    """An array has the wrong shape for the requested operation."""


class NumericError(RefsegError):
    """Non-finite values were fed to (or produced by) a numeric kernel."""


class DegenerateMaskError(NumericError):
    """Every key position of an attention call is masked out."""


class UsageError(RefsegError):
    """An operation was called in a way its contract forbids."""


class DataError(RefsegError):
    """Malformed dataset content (unknown word, bad token id, ...)."""


class GenerationError(RefsegError):
    """The synthetic-scene rejection sampler exhausted its budget."""


class CheckpointError(RefsegError):
    """A checkpoint cannot be loaded into the requested model."""
