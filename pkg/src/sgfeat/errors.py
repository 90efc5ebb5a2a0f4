"""Exception types raised across the package."""


class SGFeatError(Exception):
    """Base class for all package errors."""


class EmptyInput(SGFeatError, ValueError):
    pass


class InvalidMatrix(SGFeatError, ValueError):
    pass


class InvalidShape(SGFeatError, ValueError):
    pass


class InvalidInput(SGFeatError, ValueError):
    pass


class EmptyAnchors(SGFeatError, ValueError):
    pass


class DegenerateSet(SGFeatError, ValueError):
    pass


class RegistrationFailed(SGFeatError, RuntimeError):
    pass


class OverlapInfeasible(SGFeatError, ValueError):
    pass


class UndefinedMetric(SGFeatError, ValueError):
    pass


class ParseError(SGFeatError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
