"""Exception hierarchy.

Errors split into two families so the CLI can map them to exit codes:
``DataError`` (bad input files or degenerate geometry) and
``NumericError`` (non-finite values, singular systems).
"""


class AngleFieldError(Exception):
    pass


class DataError(AngleFieldError):
    pass


class NumericError(AngleFieldError):
    pass


class XYZFormatError(DataError):
    pass


class LengthMismatch(DataError):
    pass


class CoordinateMismatch(DataError):
    pass


class MissingNormals(DataError):
    pass


class EmptyResult(DataError):
    pass


class DegeneratePatch(DataError):
    pass


class BadMagic(DataError):
    pass


class VersionMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class RankDeficient(NumericError):
    pass


class SingularSystem(NumericError):
    pass


class NonFinite(NumericError):
    pass


class ZeroVector(NumericError):
    pass


class DegenerateMean(NumericError):
    pass
