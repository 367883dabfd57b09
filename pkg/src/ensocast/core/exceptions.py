"""Exceptions used in ensocast core modules."""


class EnsocastError(Exception):
    """Base exception for ensocast."""


class ShapeError(EnsocastError, ValueError):
    """Exception raised when array shapes or extents disagree."""


class ConfigError(EnsocastError, ValueError):
    """Exception raised for invalid configuration values."""


class FormatError(EnsocastError):
    """Exception raised for malformed binary files."""


class BadMagicError(FormatError):
    """Exception raised when a file does not start with the expected magic bytes."""


class TruncatedPayloadError(FormatError):
    """Exception raised when a file ends before its declared payload."""


class ExtentOverflowError(FormatError):
    """Exception raised when declared extents exceed the supported limits."""


class NumericError(EnsocastError, ArithmeticError):
    """Exception raised for numerical failures."""


class DivergenceError(NumericError):
    """Exception raised when a training loss becomes non-finite."""


class NonFiniteGradientError(NumericError):
    """Exception raised when an attribution gradient contains NaN or Inf."""


class EmptyResultError(EnsocastError, ValueError):
    """Exception raised when an operation would produce or consume an empty selection."""
