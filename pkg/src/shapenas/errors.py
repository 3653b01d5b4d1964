"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, NumericError -> 3, InfeasibleError -> 4.
"""


class ShapenasError(Exception):
    """Base class for all package errors."""


class ConfigError(ShapenasError):
    """Invalid configuration, usage, or out-of-range setting."""


class ValidationError(ConfigError):
    """Arguments violate an operation's declared preconditions."""


class DataError(ShapenasError):
    """Input data is missing, empty, or too small to proceed."""


class FormatError(DataError):
    """Malformed serialized file. Carries the byte offset of the defect."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ShapenasError):
    """NaN or infinity encountered where finite values are required."""


class InfeasibleError(ShapenasError):
    """No shape can satisfy the stated constraint."""
