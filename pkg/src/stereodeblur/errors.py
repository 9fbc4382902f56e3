"""Exception types shared across the package.

The CLI maps these onto process exit codes.
"""


class ContractError(ValueError):
    """Inputs violate an operation's shape or type contract."""


class DomainError(ValueError):
    """A numeric argument lies outside the operation's domain."""


class ConfigError(RuntimeError):
    """Inconsistent configuration or missing prerequisite (exit code 2)."""

    exit_code = 2


class DataError(RuntimeError):
    """Malformed or unreadable data on disk (exit code 3)."""

    exit_code = 3


class NumericError(RuntimeError):
    """Non-finite values encountered during optimization (exit code 4)."""

    exit_code = 4
