"""Exception hierarchy shared by every rafsel module."""


class RafError(Exception):
    """Base class for all rafsel errors."""


class NonSquare(RafError, ValueError):
    pass


class UnsupportedField(RafError, ValueError):
    pass


class MalformedEntry(RafError, ValueError):
    pass


class EmptyMatrix(RafError, ValueError):
    pass


class BadResolution(RafError, ValueError):
    pass


class DimensionError(RafError, ValueError):
    pass


class BreakdownError(RafError, ArithmeticError):
    """A preconditioner could not be built (e.g. zero pivot on the diagonal)."""


class ConfigError(RafError, ValueError):
    pass


class SpecError(RafError, ValueError):
    pass


class ShapeError(RafError, ValueError):
    pass


class CatalogMismatch(RafError, ValueError):
    pass


class VersionError(RafError, ValueError):
    pass


class FormatError(RafError, ValueError):
    pass


class EmptyCorpus(RafError, ValueError):
    pass
