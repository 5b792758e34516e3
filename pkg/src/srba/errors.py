"""Exception hierarchy shared by all srba modules."""


class SrbaError(Exception):
    """Base class for every error raised by the package."""


class OracleRangeError(SrbaError, IndexError):
    """A sample index fell outside ``[0, n)`` or ``[0, m)``."""


class NumericInputError(SrbaError, ValueError):
    """An input vector contained NaN or infinite entries."""


class ConfigurationError(SrbaError, ValueError):
    """Solver or experiment configuration is invalid."""


class DimensionMismatchError(SrbaError, ValueError):
    pass


class ParseError(SrbaError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class EmptyDatasetError(SrbaError, ValueError):
    pass


class PreconditionError(SrbaError, ValueError):
    pass


class NonConvergenceError(SrbaError, RuntimeError):
    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class EnumerationTooLargeError(SrbaError, ValueError):
    pass


class DivergenceError(SrbaError, RuntimeError):
    """Raised when an iterate becomes non-finite or exceeds the blow-up norm.

    ``result`` holds the partial run (trace up to the last finite row).
    """

    def __init__(self, message, result=None):
        self.result = result
        super().__init__(message)
