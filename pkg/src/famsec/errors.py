"""Exception hierarchy shared by every famsec module."""


class FamsecError(Exception):
    """Base class for all errors raised by famsec."""


class ConfigurationError(FamsecError, ValueError):
    """An invalid configuration value. ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ContractViolation(FamsecError, ValueError):
    """Arguments that break an operation's precondition (shapes, label values, ...)."""


class NumericDomainError(FamsecError, ValueError):
    """A value outside the numeric domain of an operation, e.g. a zero-norm vector."""


class LoadError(FamsecError, OSError):
    """A weights or checkpoint file that is missing, corrupt or does not match."""


class IngestionError(FamsecError, OSError):
    """A dataset tree that does not follow the expected layout, or unreadable images."""

    def __init__(self, message, paths=()):
        super().__init__(message)
        self.paths = list(paths)


class TrainingDivergence(FamsecError, RuntimeError):
    """Non-finite loss or gradient. ``payload`` carries step diagnostics."""

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = dict(payload or {})
