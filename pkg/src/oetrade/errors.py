"""Exception hierarchy shared by every module."""


class OETradeError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(OETradeError, ValueError):
    pass


class ShapeError(OETradeError, ValueError):
    pass


class NumericError(OETradeError, ArithmeticError):
    pass


class DegenerateInputError(OETradeError, ValueError):
    pass


class PreconditionError(OETradeError, ValueError):
    pass


class BoundsError(OETradeError, IndexError):
    pass


class CapacityError(OETradeError, ValueError):
    pass


class ConfigError(OETradeError, ValueError):
    pass


class FormatError(OETradeError, ValueError):
    """Raised when a persisted file is corrupt, truncated or of an unknown version."""


class DivergenceError(OETradeError, RuntimeError):
    pass
