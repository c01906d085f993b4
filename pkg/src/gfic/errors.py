"""Exception hierarchy.

Every error raised by the package derives from :class:`GficError`. The three
intermediate classes map onto CLI exit codes: configuration problems (2), data
problems (3) and numerical failures (4).
"""

from __future__ import annotations


class GficError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(GficError):
    """Invalid user configuration or arguments."""

    exit_code = 2


class DataError(GficError):
    """Malformed or insufficient input data."""

    exit_code = 3


class NumericError(GficError):
    """A numerical procedure failed (singular matrix, degenerate variance)."""

    exit_code = 4


# data problems
class UnbalancedPanel(DataError):
    pass


class DuplicateCell(DataError):
    pass


class NonNumericValue(DataError):
    pass


class MissingColumn(DataError):
    pass


class TooFewPeriods(DataError):
    pass


class MissingDataset(DataError):
    pass


class NoWithinVariation(DataError):
    pass


class ZeroIndividualVariation(DataError):
    pass


# configuration problems
class DimensionMismatch(ConfigError):
    pass


class EmptyCandidateSet(ConfigError):
    pass


class KeyMismatch(ConfigError):
    pass


class InvalidSampleSize(ConfigError):
    pass


class NonPsdCovariance(ConfigError):
    pass


# numerical failures
class SingularDesign(NumericError):
    pass


class RankDeficientControls(NumericError):
    pass


class UnitRootTarget(NumericError):
    pass


class NonPsdOmega(NumericError):
    pass


class SingularRegionMetric(NumericError):
    pass


class SingularWeight(NumericError):
    pass


class DegenerateSigma(NumericError):
    pass


class AllTrimmed(NumericError):
    pass
