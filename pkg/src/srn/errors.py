"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """An argument violates a documented precondition."""


class InvalidState(RuntimeError):
    """An operation was invoked on an object whose state forbids it."""


class ParseError(ValueError):
    """A text format could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingDiverged(RuntimeError):
    """The optimization loss became non-finite; message carries diagnostics."""
