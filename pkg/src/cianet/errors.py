"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, DataError -> 2,
NumericError -> 3.
"""


class CIANetError(Exception):
    """Base class for all package errors."""


class ShapeError(CIANetError):
    """A tensor dimension does not satisfy an operation's contract.

    Carries the offending axis name so callers can report which dimension
    broke (e.g. "channels", "height").
    """

    def __init__(self, axis, message):
        self.axis = axis
        super().__init__(f"{axis}: {message}")


class ContractError(CIANetError):
    """An API contract violation that is a programming error, not bad data."""


class DomainError(CIANetError):
    """A numeric argument is outside the domain of a loss or transform."""


class DataError(CIANetError):
    """Bad or missing input data (corpus files, manifests, checkpoints)."""


class ParseError(DataError):
    """A file could not be parsed; records file path and byte offset."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path} @ {offset}: {message}")


class CapacityError(DataError):
    """Sample generation could not place the requested objects."""


class NumericError(CIANetError):
    """A non-recoverable numeric failure (non-finite loss, etc.)."""
