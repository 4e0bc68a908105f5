"""Exception hierarchy shared by every layer of the package.

The CLI maps these onto exit codes: usage errors exit 1, data/config errors
exit 2, numeric failures exit 3.
"""


class AnticipateError(Exception):
    """Base class for all package errors."""


class ShapeError(AnticipateError):
    """Tensor operands do not conform to an op's shape contract."""


class DomainError(AnticipateError):
    """An op was applied outside its mathematical domain (e.g. empty axis)."""


class ContractError(AnticipateError):
    """An API precondition was violated by the caller."""


class NumericError(AnticipateError):
    """A non-finite value surfaced where the computation requires finite ones."""


class ConfigError(AnticipateError):
    """Invalid or inconsistent configuration."""


class DataError(AnticipateError):
    """Invalid data content (bad labels, malformed values, missing entries)."""


class FormatError(DataError):
    """A file does not match its documented binary/CSV/JSON format."""
