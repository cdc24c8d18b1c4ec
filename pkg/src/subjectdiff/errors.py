"""Exception types shared across the package.

CLI exit codes: ConfigError -> 2, DataError -> 3, InvariantViolation -> 4.
Input-contract violations raise RejectedInputError/DegenerateInputError and
surface as exit code 2 when they reach the CLI (bad arguments).
"""


class SubjectDiffError(Exception):
    """Base class for all package errors."""


class ConfigError(SubjectDiffError):
    """Malformed config file, unknown key, or invalid value."""


class DataError(SubjectDiffError):
    """Missing or unusable data artifacts."""


class CapacityError(DataError):
    """Dataset too small for the requested operation."""


class RejectedInputError(SubjectDiffError, ValueError):
    """Input violates a declared precondition (shape, range, index)."""


class DegenerateInputError(RejectedInputError):
    """Input is technically well-formed but carries no usable signal."""


class InvariantViolation(SubjectDiffError):
    """A runtime invariant was broken (e.g. frozen parameters drifted)."""


class NonFiniteLossError(InvariantViolation):
    """A loss component became NaN or infinite; training must abort."""


class CheckpointError(DataError):
    """Corrupt, incompatible, or otherwise unusable checkpoint file."""


class StageMismatchError(CheckpointError):
    """Checkpoint stage tag does not match the phase trying to load it."""
