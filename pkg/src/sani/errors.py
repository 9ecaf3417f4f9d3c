"""Exception types shared across the package.

The CLI maps ConfigError (and file/JSON problems) to exit code 1 and
everything else raised at runtime to exit code 2.
"""


class SaniError(Exception):
    """Base class for all package errors."""


class ConfigError(SaniError):
    """Invalid or inconsistent configuration."""


class EmptyCorpus(SaniError):
    pass


class EmptyBlacklist(SaniError):
    pass


class ShapeMismatch(SaniError):
    pass


class NonFiniteValue(SaniError):
    pass


class NotScalarLoss(SaniError):
    pass


class SequenceTooLong(SaniError):
    pass


class FormatVersionMismatch(SaniError):
    pass


class CorruptFile(SaniError):
    pass


class EmptyDocument(SaniError):
    pass


class NoMaskableTokens(SaniError):
    pass


class SchemeVariantMismatch(SaniError):
    pass


class FractionOutOfRange(SaniError):
    pass


class ZeroDenominator(SaniError):
    pass


class EmptyHeldout(SaniError):
    pass


class EmptyLabeledSet(SaniError):
    pass


class MissingClass(SaniError):
    pass


class IncompleteRuns(SaniError):
    pass
