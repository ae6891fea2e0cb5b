"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.  Anything else is an ordinary bug.
"""

from __future__ import annotations


class KlineError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(KlineError):
    """A configuration value is missing, malformed, or out of range."""


class DataError(KlineError):
    """Input data violates a contract (bad CSV, disordered timestamps, ...)."""


class NumericError(KlineError):
    """A numeric invariant broke at runtime (NaN loss, divergence, ...)."""


class ShapeError(KlineError):
    """Tensor operands have incompatible shapes.  Message reports both."""


class ContextOverflowError(DataError):
    """A token sequence exceeds the model's maximum context length."""
