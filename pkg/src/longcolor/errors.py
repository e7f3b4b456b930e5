"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage/validation problems are
exit 2, contract violations exit 3, I/O and file-format problems exit 4.
"""


class LongcolorError(Exception):
    """Base class for all package errors."""


class ShapeError(LongcolorError, ValueError):
    """Operands have incompatible or invalid dimensions."""


class ValidationError(LongcolorError, ValueError):
    """Input values or configuration keys violate a documented precondition."""


class ContractViolation(LongcolorError, RuntimeError):
    """A call broke an operation contract (wrong stage order, bad gate, ...)."""


class FormatError(LongcolorError, ValueError):
    """A file on disk does not match its declared binary/text format."""


class IngestionError(LongcolorError, IOError):
    """A frame directory or dataset is incomplete or unreadable."""
