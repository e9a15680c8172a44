"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage/config errors exit 1,
data errors exit 2, training failures exit 3, verification mismatches exit 4.
"""


class TokenPruneError(Exception):
    """Base class for all package errors."""


class ShapeError(TokenPruneError):
    """Operands have incompatible shapes."""


class NumericError(TokenPruneError):
    """Non-finite values where finite ones are required."""


class InputError(TokenPruneError):
    """Invalid argument values (out-of-range ids, bad probabilities, ...)."""


class ConfigError(TokenPruneError):
    """Inconsistent or invalid configuration."""


class DataError(TokenPruneError):
    """Malformed dataset files or records."""


class TrainingDivergedError(TokenPruneError):
    """Loss became non-finite during training."""

    def __init__(self, message, step=None, component=None):
        super().__init__(message)
        self.step = step
        self.component = component


class DegenerateAttentionError(TokenPruneError):
    """All attention keys were masked out."""


class DegeneratePlanError(TokenPruneError):
    """A pruning plan would retain zero tokens at some layer."""


class VerificationError(TokenPruneError):
    """Cross-check between two independent computations failed."""
