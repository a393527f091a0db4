"""Shared exception types.

Every error raised on purpose by this package derives from PersidskiiError so
callers (and the CLI) can separate domain failures from genuine bugs.
"""


class PersidskiiError(Exception):
    """Base class for all package errors."""


class DimensionError(PersidskiiError, ValueError):
    """Array shapes are inconsistent with the declared system dimensions."""


class StructureError(PersidskiiError, ValueError):
    """A structured object (LMI, certificate, config) violates its contract."""


class NumericError(PersidskiiError, ArithmeticError):
    """NaN/Inf encountered, or a numeric routine left its validity range."""


class SectorError(PersidskiiError, ValueError):
    """A nonlinearity violates its declared sector bound."""


class BracketError(PersidskiiError, ValueError):
    """A bisection was started without a valid sign-changing bracket."""


class CoverageError(PersidskiiError, ValueError):
    """A history/trajectory segment does not cover the required delay window."""


class DivergenceError(PersidskiiError, RuntimeError):
    """A simulated state exceeded the blow-up guard."""


class ConfigError(PersidskiiError, ValueError):
    """An experiment configuration is malformed; message names the violated rule."""
