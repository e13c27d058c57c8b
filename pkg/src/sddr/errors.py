"""Exception taxonomy shared across the package.

The split mirrors the CLI exit codes: configuration problems (bad config
keys, malformed formulas, invalid options) are distinct from data problems
(missing columns, unseen factor levels, out-of-support responses) and from
numeric failures during optimization.
"""


class SddrError(Exception):
    """Base class for all package errors."""


class ConfigError(SddrError):
    """Invalid configuration, option value, or model specification."""


class FormulaError(ConfigError):
    """Formula syntax or semantics error, with a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(SddrError):
    """Problem with the supplied data table or response."""


class NumericError(SddrError):
    """Numeric failure during fitting (non-finite loss, singular solve)."""
