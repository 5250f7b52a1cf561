"""Exception hierarchy.

Three families map onto the CLI exit codes: configuration problems (2),
numerical failures (3) and storage/I-O failures (4).
"""


class RomdiffError(Exception):
    """Base class for all package errors."""


class ConfigError(RomdiffError, ValueError):
    """Invalid user input: schema violations, bad dimensions, bad bounds."""


class NumericalError(RomdiffError, ArithmeticError):
    """A numerical kernel could not produce a meaningful result."""


class StoreError(RomdiffError, OSError):
    """Snapshot store could not be read or written."""


class DimensionMismatch(ConfigError):
    pass


class InvalidBounds(ConfigError):
    pass


class InvalidMaterial(ConfigError):
    pass


class RankExceedsSnapshots(ConfigError):
    pass


class RankMismatch(ConfigError):
    pass


class EmptyTrainSet(ConfigError):
    pass


class EmptyPrefSet(ConfigError):
    pass


class DisjointnessError(ConfigError):
    pass


class SingularMatrix(NumericalError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class SingularReducedOperator(SingularMatrix):
    pass


class ConvergenceFailure(NumericalError):
    pass


class BreakdownZeroIterate(NumericalError):
    pass


class EmptyBasis(NumericalError):
    pass


class DegenerateDenominator(NumericalError):
    pass


class AllDenominatorsDegenerate(NumericalError):
    pass


class FormatVersionMismatch(StoreError):
    pass


class ChecksumMismatch(StoreError):
    pass


class MissingFile(StoreError):
    pass
