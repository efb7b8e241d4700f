"""Exception hierarchy shared by every subpackage.

The CLI maps these onto process exit codes, so keep them coarse.
"""


class MMGError(Exception):
    """Base class for all library errors."""


class ConfigError(MMGError, ValueError):
    """Invalid shapes, hyperparameters, masks or CLI usage."""


class DataError(MMGError):
    """Missing files, malformed manifests, split violations at load time."""


class NumericError(MMGError, FloatingPointError):
    """A NaN or Inf appeared where a finite value is required."""
