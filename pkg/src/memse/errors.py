"""Exception hierarchy shared across the engine."""


class MemseError(Exception):
    """Base class for engine errors."""


class FormatError(MemseError, ValueError):
    """Malformed manifest, blob, or run configuration."""


class InfeasibleError(MemseError, RuntimeError):
    """No point in the search region satisfies the power budget."""


class NumericError(MemseError, RuntimeError):
    """Numerical failure (singular probe system, non-finite values)."""
