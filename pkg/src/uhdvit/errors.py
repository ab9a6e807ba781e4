"""Exception hierarchy shared by all modules."""


class UHDError(Exception):
    """Base class for every error raised by uhdvit."""


class DimensionError(UHDError, ValueError):
    """Operand shapes do not agree."""


class ConfigError(UHDError, ValueError):
    """A configuration value violates its contract."""


class GeometryError(UHDError, ValueError):
    """A token grid cannot be windowed or unshuffled as requested."""


class BudgetError(UHDError, ValueError):
    """A token budget does not divide evenly."""


class DegenerateMaskError(UHDError, ValueError):
    """An attention row has no admissible key."""


class NumericsError(UHDError, ArithmeticError):
    """An operation produced a non-finite value."""
