"""Exception types shared across the package.

The CLI maps these onto process exit codes; library code raises them
directly so callers can distinguish caller bugs from bad files.
"""


class ContractViolation(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """A run configuration failed validation before any computation."""


class FormatError(ValueError):
    """A serialized artifact (weight file, trace, report) is malformed."""
