"""Exception hierarchy shared across the package.

Each class maps to one failure family so callers (and the CLI exit-code
table) can distinguish bad configuration from bad data from numeric
failures without parsing messages.
"""


class PhqfuseError(Exception):
    """Base class for all package errors."""


class DimensionError(PhqfuseError, ValueError):
    """Operand shapes are incompatible; message carries both shapes."""


class ContractError(PhqfuseError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(PhqfuseError, ValueError):
    """Invalid or inconsistent configuration value."""


class FormatError(PhqfuseError, ValueError):
    """A file does not conform to its declared binary/text format."""


class ParseError(PhqfuseError, ValueError):
    """Row- or line-level parse failure; message names the location."""


class BoundsError(PhqfuseError, ValueError):
    """A requested span lies outside the underlying data."""


class ValidationError(PhqfuseError, ValueError):
    """Well-formed input failed a semantic check.

    ``count`` optionally carries the offending cardinality (for example
    the number of Q&A pairs actually parsed).
    """

    def __init__(self, message: str, count: int | None = None):
        super().__init__(message)
        self.count = count


class PairingError(ValidationError):
    """Question/answer lines could not be paired up."""


class RangeError(PhqfuseError, ValueError):
    """A scalar value (token id, rating) is outside its legal range."""


class RemoteError(PhqfuseError, RuntimeError):
    """A remote text-generation endpoint failed after all retries."""


class NonFiniteError(PhqfuseError, FloatingPointError):
    """A numeric operation produced NaN or Inf."""
