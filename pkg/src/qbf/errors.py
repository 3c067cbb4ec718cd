"""Exception types shared across the package.

Each class maps to one failure category so callers (and the CLI exit-code
table) can distinguish bad configuration from bad data from numeric blowups.
"""


class QbfError(Exception):
    """Base class for all package errors."""


class ShapeError(QbfError):
    """Operands have incompatible shapes; message names both shapes."""


class ConfigError(QbfError):
    """Invalid configuration value or unusable experiment setup."""


class DataFormatError(QbfError):
    """Malformed dataset bytes or checkpoint payload."""


class StateError(QbfError):
    """Operation called in the wrong object state (e.g. double attach)."""


class NumericError(QbfError):
    """Non-finite value where the contract requires finite numbers."""
