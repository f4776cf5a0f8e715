"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration."""


class DimensionError(ValueError):
    """Array shape does not match what an operation expects."""


class LengthError(ValueError):
    """Signal too short for the requested analysis."""


class StateError(RuntimeError):
    """Operation needs state (e.g. statistics) that has not been initialised."""


class NumericalError(FloatingPointError):
    """A non-finite value appeared during computation."""


class IntegrityError(IOError):
    """A checkpoint or data file failed its integrity check."""


class IncompatibleCheckpointError(IOError):
    """Checkpoint was written with an unsupported format version."""
