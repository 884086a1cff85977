"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and shape problems are
usage errors (exit 1), numeric failures detected mid-computation are exit 2.
"""


class DGCRNError(Exception):
    """Base class for package errors."""


class ConfigError(DGCRNError):
    """Bad or inconsistent configuration value."""


class DimensionError(DGCRNError):
    """Operands have incompatible shapes for the requested operation."""


class NumericError(DGCRNError):
    """A computation produced NaN/Inf or an oracle evaluation failed."""


class DegenerateInputError(DGCRNError):
    """Input data is degenerate (empty, all-missing, zero variance, ...)."""
