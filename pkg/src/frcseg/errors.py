"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 1, dataset problems with 2, numerical failures with 3.
"""


class FrcsegError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(FrcsegError):
    """Invalid or incompatible configuration."""


class DataError(FrcsegError):
    """Missing, unreadable or malformed dataset content."""


class NumericError(FrcsegError):
    """Non-finite values encountered during training or evaluation."""
