"""Exception hierarchy shared by every subsystem."""


class LMSCNetError(Exception):
    pass


class DimensionError(LMSCNetError, ValueError):
    """Tensor extents disagree on a named axis."""


class GeometryError(LMSCNetError, ValueError):
    """A windowed op would produce an empty or misaligned output."""


class DataError(LMSCNetError, ValueError):
    """Label or sample content is invalid (bad class id, missing file, ...)."""


class FormatError(LMSCNetError, ValueError):
    """A byte stream does not match its declared layout."""


class ConfigError(LMSCNetError, ValueError):
    pass


class NumericalError(LMSCNetError, ArithmeticError):
    """Training produced a non-finite loss."""
