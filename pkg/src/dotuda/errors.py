"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """A NaN or Inf reached an operation that rejects it."""


class DegenerateVectorError(ValueError):
    """A vector is too close to zero to be normalized."""


class FormatError(ValueError):
    """A serialized file is corrupt, truncated, or inconsistent."""


class ConfigError(ValueError):
    """A configuration object violates its invariants."""
