"""Exception types raised across the package."""


class AlastError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AlastError, ValueError):
    pass


class NumericError(AlastError, ArithmeticError):
    pass


class ScheduleError(AlastError, ValueError):
    pass


class ConfigError(AlastError, ValueError):
    """Invalid configuration. ``field`` holds the dotted path of the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class FormatError(AlastError, ValueError):
    pass


class ConsistencyError(AlastError, ValueError):
    pass


class UsageError(AlastError, RuntimeError):
    pass
