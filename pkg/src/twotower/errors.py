"""Exception hierarchy for the package.

The CLI maps these onto process exit codes (see ``twotower.cli``); library
callers catch them like any other exception.
"""


class TwoTowerError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(TwoTowerError):
    """Incompatible operand shapes; the message names both shapes."""


class DegenerateRowError(TwoTowerError):
    """A row required to have positive Euclidean norm is numerically zero."""

    def __init__(self, message, row=None, row_id=None):
        super().__init__(message)
        self.row = row
        self.row_id = row_id


class DataFormatError(TwoTowerError):
    """A file does not conform to its declared on-disk format."""


class BadMagicError(DataFormatError):
    """File does not start with the expected magic bytes."""


class FormatVersionError(DataFormatError):
    """File declares a format version this code does not read."""


class TruncatedFileError(DataFormatError):
    """File ends in the middle of a declared structure."""


class IdCountMismatchError(DataFormatError):
    """The id block holds fewer ids than the header declares."""


class ManifestError(DataFormatError):
    """A caption manifest line is malformed; carries the 1-based line number."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class ConfigError(TwoTowerError):
    """A run-configuration key is unknown or a value is out of range."""


class DivergenceError(TwoTowerError):
    """Training produced a non-finite loss or parameter value."""


class FingerprintMismatchError(TwoTowerError):
    """An index was queried with a model other than the one that built it."""
