"""Error taxonomy.

Everything raised on purpose by this package derives from OpennessError so
callers (and the CLI) can separate data problems from genuine bugs. DataError
covers malformed inputs and violated preconditions; the CLI maps it to exit
code 1.
"""
from __future__ import annotations


class OpennessError(Exception):
    """Base class for all errors raised by this package."""


class DataError(OpennessError):
    """Malformed input data or a violated operation precondition."""


# container / matrix level

class BadMagic(DataError):
    """Embedding container does not start with the expected magic bytes."""


class TruncatedPayload(DataError):
    """Container payload length disagrees with the header row/dim counts."""


class NonFiniteEntry(DataError):
    """A NaN or infinity appeared where finite floats are required."""


class InvalidShape(DataError):
    """Matrix or label array has an impossible shape (zero rows, zero dim, ...)."""


class ZeroNormRow(DataError):
    def __init__(self, row: int):
        self.row = row
        super().__init__(f"row {row} has zero Euclidean norm and cannot be normalized")


class NotNormalized(DataError):
    """Unit-norm rows were required but the data is not normalized."""


class DimMismatch(DataError):
    """Two matrices that must share a feature dimension do not."""


# vocabulary / prediction level

class EmptyVocabulary(DataError):
    """A prediction was requested against zero candidate classes."""


class LabelOutsideVocabulary(DataError):
    """An image label does not belong to the vocabulary being evaluated."""


class OverlapBetweenTargetAndDistractors(DataError):
    """Target and distractor vocabularies share a class."""


class VocabularyTooSmall(DataError):
    """The operation needs at least two candidate classes."""


class EmptyList(DataError):
    """An ensemble was requested over zero prompt embeddings."""


class ZeroNormMean(DataError):
    """Prompt embeddings cancelled out; their mean cannot be renormalized."""


# protocol level

class TooManyVocabularies(DataError):
    """Exact permutation enumeration was requested above the factorial budget."""


# adversarial level

class LexiconTooSmall(DataError):
    """Fewer candidate words than the requested vocabulary size."""


class ExhaustiveBudgetExceeded(DataError):
    """C(lexicon, size) exceeds the configured enumeration budget."""


# geometry level

class EmptyInput(DataError):
    """A mean over zero pairs is undefined."""


class TooFewRows(DataError):
    """Pairwise statistics need at least two rows."""


class UnknownClass(DataError):
    """A class id or name does not resolve against the catalog."""


# retrieval level

class EmptyCorpus(DataError):
    """The caption corpus has no rows."""


class ZeroNormResult(DataError):
    """Interpolation produced a zero vector; renormalization is undefined."""


class DatasetInvalid(DataError):
    """A dataset failed validation; carries the violation list."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations[:5])
        more = "" if len(self.violations) <= 5 else f" (+{len(self.violations) - 5} more)"
        super().__init__(f"dataset failed validation: {lines}{more}")
