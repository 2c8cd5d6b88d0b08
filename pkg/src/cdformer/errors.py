"""Exception types shared across the package.

ContractError and subclasses map to CLI exit code 1; verification
failures (grad-check, bench assertions) map to exit code 2.
"""


class ContractError(Exception):
    """A documented precondition or invariant was violated by the caller."""


class ShapeError(ContractError):
    """Operand extents do not satisfy an operation's shape contract."""


class IndexRangeError(ContractError):
    """An index lies outside the addressed extent."""


class ConfigError(ContractError):
    """A run/model configuration is malformed or inconsistent."""


class FormatError(ContractError):
    """A file being parsed does not match its documented format."""


class VerificationError(Exception):
    """A correctness check (gradient check, benchmark assertion) failed."""
