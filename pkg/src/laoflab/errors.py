"""Exception hierarchy shared across the package."""


class LabError(Exception):
    """Base class for all errors raised by laoflab."""


class ShapeError(LabError, ValueError):
    pass


class NumericError(LabError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class GraphStateError(LabError, RuntimeError):
    pass


class UsageError(LabError, ValueError):
    """Invalid arguments, configuration, or call order."""


class ConfigError(UsageError):
    pass


class FormatError(LabError, ValueError):
    """A file does not follow the expected binary layout."""


class CorruptionError(FormatError):
    pass


class StorageError(LabError, OSError):
    pass


class UndefinedCorrelationError(LabError, ValueError):
    pass
