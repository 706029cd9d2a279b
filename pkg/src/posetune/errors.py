"""Exception hierarchy shared by all posetune modules."""


class PoseTuneError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PoseTuneError, ValueError):
    """A tensor has the wrong shape for the requested operation."""


class ConfigurationError(PoseTuneError, ValueError):
    """An option, block path, or setting does not resolve to anything valid."""


class PreconditionError(PoseTuneError, RuntimeError):
    """An operation was called in a state that violates its contract."""


class FormatError(PoseTuneError, ValueError):
    """A file or byte stream does not match the expected format."""


class NumericError(PoseTuneError, ArithmeticError):
    """A computation produced non-finite values."""
