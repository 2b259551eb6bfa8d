"""Exception hierarchy shared by every module."""


class TavceError(Exception):
    """Base class for all package errors."""


class ShapeError(TavceError, ValueError):
    pass


class DTypeError(TavceError, TypeError):
    pass


class NonFiniteError(TavceError, FloatingPointError):
    """A NaN or Inf appeared; ``op`` names the operation that produced it."""

    def __init__(self, op: str, where: str = "forward"):
        self.op = op
        super().__init__(f"non-finite value produced by {op} ({where})")


class GraphError(TavceError, RuntimeError):
    pass


class ConfigError(TavceError, ValueError):
    pass


class FormatError(TavceError, ValueError):
    """Malformed binary file (bad magic, version, truncation)."""


class ChecksumError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionMismatchError(TavceError, ValueError):
    pass


class DivergenceError(TavceError, RuntimeError):
    def __init__(self, iteration: int, detail: str = ""):
        self.iteration = iteration
        msg = f"training diverged at iteration {iteration}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
