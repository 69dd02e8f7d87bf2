"""Exception hierarchy for pooltest."""


class PoolTestError(Exception):
    """Base class for all pooltest errors."""


class ArgumentError(PoolTestError, ValueError):
    """Invalid arguments: malformed datasets, bad flags, inconsistent shapes."""


class DomainError(PoolTestError, ValueError):
    """Parameter values outside the region where a quantity is defined."""


class UnidentifiableError(PoolTestError):
    """The requested model cannot be identified from the data."""


class RankDeficientError(UnidentifiableError):
    """The covariate design matrix does not have full column rank."""

    def __init__(self, message: str, dependent_columns: tuple[str, ...] = ()):
        super().__init__(message)
        self.dependent_columns = dependent_columns


class UnavailableError(PoolTestError):
    """A derived quantity (standard error, test) is not available for a fit."""
