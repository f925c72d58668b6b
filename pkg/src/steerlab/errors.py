"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` -> 2, ``DataError`` -> 3.
"""


class SteerlabError(Exception):
    pass


class ConfigError(SteerlabError, ValueError):
    pass


class DataError(SteerlabError, ValueError):
    """Shape, dimension or content mismatch in arrays, records or files."""


class FormatError(DataError):
    """A file does not follow the expected binary layout."""
