"""Exception types shared across the package."""


class StirfryError(Exception):
    """Base class for all package errors."""


class ShapeError(StirfryError, ValueError):
    """Operand extents do not agree."""


class ContractError(StirfryError, ValueError):
    """A documented precondition was violated."""


class ParseError(StirfryError, ValueError):
    """A file could not be parsed.

    ``line`` is the 1-based line number of the offending row when known.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class NoCyclesError(ContractError):
    """Phase segmentation found no complete stir-fry cycle."""


class DivergenceError(StirfryError, RuntimeError):
    """A rollout or training run produced non-finite values."""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


class CheckpointError(StirfryError, ValueError):
    """A checkpoint file is malformed."""
