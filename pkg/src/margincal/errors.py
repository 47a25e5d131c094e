"""Exception hierarchy shared by all margincal modules."""


class MarginCalError(Exception):
    """Base class for all domain errors raised by this package."""


class FormatError(MarginCalError):
    """Malformed file content (PGM header, CSV schema, non-finite values)."""


class ConfigError(MarginCalError):
    """Invalid configuration values or hyper-parameters."""


class DataError(MarginCalError):
    """Invalid label data (out-of-range labels, shape mismatches)."""


class ShapeError(DataError):
    """Array shapes that do not agree."""


class StatsError(MarginCalError):
    """Degenerate label statistics (e.g. no effective pixels)."""


class NumericError(MarginCalError):
    """Non-finite values where finite arithmetic is required."""


class DegenerateError(MarginCalError):
    """A quantity whose defining denominator vanishes."""


class VacuousBoundError(MarginCalError):
    """Raised when the generalization bound is uninformative for every class."""


class TrainError(MarginCalError):
    """Training aborted (NaN loss, bad optimizer state)."""
