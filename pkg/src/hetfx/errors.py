"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: parameter/config problems exit 1, data
problems exit 2, numeric failures exit 3.
"""
from __future__ import annotations

__all__ = [
    "HetfxError",
    "ParameterError",
    "DataError",
    "SchemaError",
    "ValidationError",
    "NumericError",
    "FitError",
    "SingularityError",
    "InsufficientSupportError",
    "DegenerateDensityWarning",
]


class HetfxError(Exception):
    """Base class for all package errors."""


class ParameterError(HetfxError):
    """A caller-supplied parameter or configuration value is invalid."""


class DataError(HetfxError):
    """Input data cannot be used."""


class SchemaError(DataError):
    """A file or table does not have the declared shape/columns."""


class ValidationError(DataError):
    """Values violate a contract (non-binary treatment, non-finite cells, ...)."""


class NumericError(HetfxError):
    """A numeric procedure failed (singular system, no usable candidate, ...)."""


class FitError(NumericError):
    """A model fit could not be completed on the given data."""


class SingularityError(NumericError):
    """A linear system was rank deficient."""


class InsufficientSupportError(NumericError):
    """Too few observations carry positive weight for a local fit."""


class DegenerateDensityWarning(UserWarning):
    """The conditional-variance floor was engaged on a large share of rows."""
