"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array shapes do not line up."""


class UsageError(ValueError):
    """Arguments violate an operation's preconditions."""


class FormatError(ValueError):
    """A data file does not follow the expected binary layout."""
