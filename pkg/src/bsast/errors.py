"""Exception types shared across the package."""


class BsastError(Exception):
    """Base class for all package errors."""


class InvalidArgument(BsastError, ValueError):
    pass


class FormatError(BsastError, ValueError):
    """A file did not match its declared binary or text layout."""


class NumericError(BsastError, ArithmeticError):
    """A non-finite value appeared; ``stage`` names where."""

    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or f"non-finite values at stage '{stage}'")


class NotFound(BsastError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "not found"


class CorpusError(BsastError, OSError):
    """Corpus files could not be read or failed validation."""

    def __init__(self, message, problems=()):
        self.problems = list(problems)
        super().__init__(message)


class VerificationFailure(BsastError, AssertionError):
    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)
