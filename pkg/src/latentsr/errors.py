"""Exception types shared across the package.

The CLI maps these onto process exit codes (see cli.EXIT_CODES).
"""


class LatentSRError(Exception):
    """Base class for all package errors."""


class InvalidArgument(LatentSRError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class ConfigError(LatentSRError, ValueError):
    """A run configuration is malformed (unknown keys, bad values, missing file)."""


class MissingPrerequisite(LatentSRError):
    """A stage prerequisite (e.g. a teacher checkpoint) is absent."""


class NumericError(LatentSRError, ArithmeticError):
    """A tensor became non-finite; carries the name of the offending tensor."""

    def __init__(self, tensor_name: str, detail: str = ""):
        self.tensor_name = tensor_name
        msg = f"non-finite values in '{tensor_name}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ImageIOError(LatentSRError, IOError):
    """An image file could not be read or written."""


class InvariantViolation(LatentSRError, RuntimeError):
    """An internal contract was broken (e.g. frozen parameters changed)."""
