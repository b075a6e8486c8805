"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit with 2,
numerical failures with 3 and I/O problems (plain ``OSError``) with 1.
"""


class ValidationError(ValueError):
    """Raised when inputs or configuration violate a shape or value contract."""


class NumericalError(FloatingPointError):
    """Raised when a loss or intermediate tensor becomes non-finite."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class PipelineStageError(RuntimeError):
    """Wraps an error raised inside one inference stage, tagged with the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
