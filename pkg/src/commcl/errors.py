"""Exception hierarchy shared by every module."""


class CommError(Exception):
    """Base class for all library errors."""


class ConfigError(CommError):
    """Bad shapes, geometry, or configuration values."""


class UsageError(CommError):
    """An operation was called out of order or on the wrong object."""


class DataError(CommError):
    """Input data is outside the declared domain (e.g. unknown token id)."""


class NumericFault(CommError):
    """A non-finite value or an unfactorizable matrix showed up."""

    def __init__(self, message, context=None):
        self.context = dict(context or {})
        if self.context:
            ctx = ", ".join(f"{k}={v}" for k, v in self.context.items())
            message = f"{message} [{ctx}]"
        super().__init__(message)


class PretrainingFault(CommError):
    """The backbone did not reach the retrieval floor within its step budget."""
