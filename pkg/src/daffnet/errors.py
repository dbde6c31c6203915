"""Exception hierarchy shared across the package."""


class DaffError(Exception):
    """Base class for all package errors."""


class ContractViolation(DaffError, ValueError):
    """An argument violates an operation's shape or value precondition."""


class NumericFault(DaffError, ArithmeticError):
    """NaN or Inf produced where finite values are required."""


class GradientError(DaffError, RuntimeError):
    """Misuse of the gradient machinery (non-scalar loss, detached graph, replay)."""


class VolumeFormatError(DaffError, ValueError):
    """Base class for malformed volume or checkpoint files."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class VersionMismatchError(VolumeFormatError):
    pass


class ConfigError(DaffError, ValueError):
    """Invalid configuration file or option combination."""
