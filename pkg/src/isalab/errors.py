"""Exception types shared across the package."""


class IsaError(Exception):
    """Base class for all package errors."""


class ValidationError(IsaError, ValueError):
    """An input object violates one of its invariants."""


class DimensionError(ValidationError):
    pass


class SolveError(IsaError, ArithmeticError):
    pass


class BudgetError(IsaError):
    """An enumeration or perturbation budget was exceeded."""


class ParseError(ValidationError):
    """A text document could not be parsed; carries the 1-based line number."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
