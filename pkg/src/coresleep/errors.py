class CoreSleepError(Exception):
    """Base class for every error raised deliberately by this package."""


class ShapeError(CoreSleepError, ValueError):
    pass


class ConfigError(CoreSleepError, ValueError):
    pass


class DataError(CoreSleepError, ValueError):
    pass


class NonFiniteError(CoreSleepError, FloatingPointError):
    pass


class NonDeterministicError(CoreSleepError, RuntimeError):
    pass


class CheckpointError(CoreSleepError, IOError):
    pass
