"""Exception types that map onto the CLI exit-code contract."""


class UsageError(Exception):
    """Bad flags, bad config keys, or otherwise malformed invocations (exit 1)."""


class DataError(Exception):
    """Malformed or insufficient input data (exit 2)."""


class NumericError(Exception):
    """Non-finite losses or a failed gradient check (exit 3)."""
