"""Exception hierarchy shared by every subsystem."""


class ESANetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ESANetError, ValueError):
    """Shapes, specs or config values are inconsistent."""


class FactorViolationError(ConfigurationError):
    """A pooling size does not evenly divide the feature map it pools."""


class DegenerateVarianceError(ESANetError, ValueError):
    """Batch statistics requested over fewer than two elements."""


class UsageError(ESANetError, ValueError):
    """An API was called outside of its documented preconditions."""


class DivergenceError(ESANetError, RuntimeError):
    """Training produced a non-finite loss."""
