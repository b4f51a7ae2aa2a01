"""Exception hierarchy shared by every layer of the package."""


class MtunetError(Exception):
    """Base class for all package errors."""


class DimensionError(MtunetError, ValueError):
    """Incompatible tensor extents."""


class ConfigError(MtunetError, ValueError):
    """Invalid or inconsistent configuration."""


class ConfigMismatchError(ConfigError):
    """A checkpoint was produced under a different configuration."""


class DataError(MtunetError, ValueError):
    """Malformed input data (labels out of range, wrong layout)."""


class NumericalError(MtunetError, ArithmeticError):
    """A forward op produced NaN or Inf, or a loss is not finite."""


class StateError(MtunetError, RuntimeError):
    """Object is not in a state that permits the requested operation."""


class BoundsError(MtunetError, IndexError):
    """Index outside the valid range."""


class FormatError(MtunetError, ValueError):
    """Tensor/checkpoint file header could not be parsed."""


class CorruptionError(MtunetError, ValueError):
    """File body disagrees with its header or manifest."""
