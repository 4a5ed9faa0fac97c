"""Exception taxonomy shared across the toolkit.

CLI exit codes: ConfigError -> 2, DataError (and subclasses) -> 3,
NumericError -> 4.
"""


class MedmimicError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(MedmimicError):
    """Operand shapes are inconsistent with the operation's contract."""


class CapacityError(ShapeError):
    """A padded dimension is too small for the data it must hold."""


class ParameterError(MedmimicError):
    """An argument value is outside its allowed range."""


class ConfigError(MedmimicError):
    """Invalid or unreadable configuration."""


class DataError(MedmimicError):
    """Problem with on-disk data (missing, malformed, inconsistent)."""


class FormatError(DataError):
    """Binary tensor file violates the MMFT format."""


class SchemaError(DataError):
    """CSV/manifest contents violate the expected schema."""


class InsufficientDataError(DataError):
    """Not enough samples for the requested statistic or split."""


class DegenerateLabelsError(DataError):
    """A label vector contains a single class where two or more are required."""


class NumericError(MedmimicError):
    """A non-finite value appeared where finite values are required."""
