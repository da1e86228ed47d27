"""Exception hierarchy shared across the scalar types and reducers."""


class CertinferError(ArithmeticError):
    """Base class for all arithmetic errors raised by this package."""


class FormatMismatchError(CertinferError):
    """Operands disagree on precision, scale or rounding mode."""


class InvalidOperationError(CertinferError):
    """Operation has no well-defined result (0/0, inf - inf, inf * 0, inf / inf)."""


class RangeOverflowError(CertinferError, OverflowError):
    """Fixed point result magnitude left the format's representable range.

    Raised instead of saturating or wrapping; also catchable as the builtin
    OverflowError.
    """


class UnsupportedModeError(CertinferError):
    """Algorithm requires a rounding mode other than the one configured."""
