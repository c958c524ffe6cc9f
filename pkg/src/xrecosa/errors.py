"""Exception types raised across the package."""


class XReCoSaError(Exception):
    """Base class for all package errors."""


class DimensionError(XReCoSaError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(XReCoSaError, ValueError):
    """An operation was called outside its documented preconditions."""


class ConfigError(XReCoSaError, ValueError):
    pass


class FormatError(XReCoSaError, ValueError):
    """Input data does not follow the expected file format."""


class VersionError(XReCoSaError):
    """A checkpoint does not match the expected configuration or vocabulary."""


class CorruptionError(XReCoSaError):
    """A checkpoint blob failed its integrity check."""


class NumericError(XReCoSaError, ArithmeticError):
    """NaN or Inf encountered where finite values are required."""
