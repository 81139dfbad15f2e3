"""Exception hierarchy shared by every stage of the pipeline."""


class PhaseError(Exception):
    """Base class for all package errors."""


class ConfigError(PhaseError, ValueError):
    """A configuration value is out of its allowed range.

    ``field`` names the offending configuration entry.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(PhaseError, ValueError):
    """Input data is inconsistent with what an operation requires."""


class NumericError(PhaseError, ArithmeticError):
    """A numeric computation produced non-finite values."""


class ModelFormatError(PhaseError, ValueError):
    """A serialized model file is corrupt or of an unsupported version."""
