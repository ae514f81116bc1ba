"""Exception hierarchy shared by every mozart module."""


class MozartError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(MozartError, ValueError):
    pass


class ShapeError(MozartError, ValueError):
    pass


class ParseError(MozartError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(MozartError, ValueError):
    pass


class TrainingDiverged(MozartError, ArithmeticError):
    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
        self.epoch = epoch
