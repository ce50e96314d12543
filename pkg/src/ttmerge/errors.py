"""Exception hierarchy shared across the package."""


class TTMergeError(Exception):
    """Base class for every error raised by ttmerge."""


class FormatError(TTMergeError, ValueError):
    """Bad magic bytes, unsupported version or unparsable header."""


class CorruptionError(TTMergeError, ValueError):
    """Header and payload disagree (shape, byte count, offsets)."""


class ValidationError(TTMergeError, ValueError):
    """Well-formed input whose values violate an invariant (e.g. NaN weights)."""


class AlignmentError(TTMergeError, ValueError):
    """Two parameter maps differ in names or shapes."""


class DomainError(TTMergeError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class DivergenceError(TTMergeError, ArithmeticError):
    """Training produced a non-finite loss."""


class StalenessError(TTMergeError):
    """A cached artifact does not match the current run (config digest or size)."""
