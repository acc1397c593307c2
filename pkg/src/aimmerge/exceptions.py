class AimMergeError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatchError(AimMergeError, ValueError):
    pass


class ValidationError(AimMergeError, ValueError):
    pass


class ConfigError(ValidationError):
    pass


class DivergenceError(AimMergeError, FloatingPointError):
    """Training produced a non-finite loss or parameter vector.

    ``context`` carries whatever the caller knew at the time (task, iteration,
    phase) so that the harness can write a structured error record.
    """

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = dict(context)

    def to_record(self):
        return {"type": "error", "error": "divergence", "message": str(self), **self.context}
