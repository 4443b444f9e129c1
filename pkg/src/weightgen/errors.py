"""Exception types shared across the package.

Every failure mode surfaced by the library is a subclass of WeightgenError,
so callers (and the CLI) can catch one base type and still branch on the
specific condition.
"""


class WeightgenError(Exception):
    """Base class for all library errors."""


class ShapeError(WeightgenError):
    """Operand shapes violate an operation's contract.

    The message always names both offending shapes.
    """


class CardinalityError(WeightgenError):
    """A basis cardinality violates its admissible range."""


class QuantRangeError(WeightgenError):
    """A bitwidth is outside the supported range."""


class NonFiniteError(WeightgenError):
    """An input or an intermediate quantity is NaN or infinite."""


class DegenerateFactorError(WeightgenError):
    """A factor column has zero norm where a normalization is required."""


class DivergenceError(WeightgenError):
    """An iterative optimization produced a non-finite loss."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class IdxFormatError(WeightgenError):
    """Base class for IDX dataset file problems."""


class IdxMagicError(IdxFormatError):
    """The file's magic number is not the expected IDX magic."""


class IdxTruncatedError(IdxFormatError):
    """The file payload is shorter than its header promises."""


class IdxCountMismatchError(IdxFormatError):
    """Image and label files disagree on the sample count."""


class FactorFileError(WeightgenError):
    """A factor container file is malformed or unsupported."""


class ConfigError(WeightgenError):
    """A run configuration is invalid; the message names the field."""
