"""Exception hierarchy shared by all modules.

CLI exit-code mapping: ParameterError/DataError -> 3, NumericError -> 4,
argparse usage errors -> 2.
"""


class LumisplatError(Exception):
    """Base class for all package errors."""


class ParameterError(LumisplatError):
    """Caller passed inconsistent shapes, ranges, or non-rigid transforms."""


class DataError(LumisplatError):
    """An input file or asset is malformed or violates its invariants."""


class NumericError(LumisplatError):
    """A computation produced non-finite values or diverged."""
