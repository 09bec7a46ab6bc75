"""Exception hierarchy shared by all modules."""


class FaeLVMError(Exception):
    """Base class for library errors."""


class ShapeError(FaeLVMError, ValueError):
    """Array shapes, lengths or topologies do not agree."""


class InvalidValueError(FaeLVMError, ValueError):
    """Non-finite or otherwise invalid numeric input."""


class DomainError(FaeLVMError, ValueError):
    """A parameter lies outside its mathematical domain (e.g. a width <= 0)."""


class ContractError(FaeLVMError, ValueError):
    """A documented precondition of an operation was violated."""


class DegenerateDirectionError(InvalidValueError):
    """A direction vector is too short to define an angle."""


class NumericError(FaeLVMError, ArithmeticError):
    """A numerical routine failed (e.g. Cholesky of a non-PD matrix)."""


class TrainingAborted(FaeLVMError, RuntimeError):
    """Optimization produced a non-finite objective."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class ConfigError(FaeLVMError, ValueError):
    """Invalid configuration or search-space specification."""


class FormatError(FaeLVMError, ValueError):
    """Malformed input file or unsupported format version."""


class VersionError(FormatError):
    """A file declares a format version this library cannot read."""
