"""Exception hierarchy.

Every error raised on purpose derives from :class:`HyoloError`; the CLI maps
the three families below onto its exit codes.
"""


class HyoloError(Exception):
    """Base class for all package errors."""


class ConfigError(HyoloError, ValueError):
    """A run configuration is malformed or out of range (exit code 2)."""


class DataError(HyoloError, ValueError):
    """Input data (taxonomy, labels, images) is invalid (exit code 3)."""


class NumericError(HyoloError, ArithmeticError):
    """A computation produced or received unusable numbers (exit code 4)."""


# taxonomy
class TaxonomyError(DataError):
    pass


class MalformedTaxonomy(TaxonomyError):
    pass


class CycleDetected(TaxonomyError):
    pass


class MultipleRoots(TaxonomyError):
    pass


class SelfParent(TaxonomyError):
    pass


class DuplicateNode(TaxonomyError):
    pass


class RaggedDepthWithoutPadding(TaxonomyError):
    pass


class UnknownNode(TaxonomyError, KeyError):
    def __str__(self):  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class RootHasNoAncestorSet(TaxonomyError):
    pass


class LevelOutOfRange(TaxonomyError, IndexError):
    pass


class IndexOutOfRange(TaxonomyError, IndexError):
    pass


class NotALeaf(TaxonomyError):
    pass


# tensor / numerics
class ShapeMismatch(NumericError, ValueError):
    pass


class NonFiniteValue(NumericError):
    pass


class MissingGradient(NumericError):
    pass


class DegenerateBox(NumericError, ValueError):
    pass


class TargetOutOfRange(NumericError, ValueError):
    pass


class NonFiniteLoss(NumericError):
    pass


class EmptyLevels(NumericError, ValueError):
    pass


# model / data / evaluation
class DepthMismatch(DataError):
    pass


class DatasetEmpty(DataError):
    pass


class EmptyInput(DataError):
    pass


class EmptySplit(DataError):
    pass


class CanvasTooSmall(DataError):
    pass


class MalformedLine(DataError):
    pass


class InvalidPath(DataError):
    pass


class BoxOutOfRange(DataError):
    pass
