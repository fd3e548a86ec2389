"""Exception types shared across the package.

The CLI maps these onto exit codes: ValidationError -> 1, ArtifactIOError -> 2.
"""


class ValidationError(ValueError):
    """Bad input data, out-of-range parameter, or violated precondition."""


class ArtifactIOError(OSError):
    """Missing, malformed, or locked pipeline artifact."""


class TrainingError(RuntimeError):
    """Training aborted, e.g. a non-finite gradient in a named parameter block."""
