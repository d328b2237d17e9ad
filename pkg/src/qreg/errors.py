"""Exception hierarchy shared by every qreg module."""


class QRegError(Exception):
    """Base class for all errors raised by qreg."""


class DegenerateInput(QRegError, ValueError):
    """Point sets too degenerate (collinear, coincident) for a rigid fit."""


class EmptyCloud(QRegError, ValueError):
    pass


class TooFewPoints(QRegError, ValueError):
    pass


class SingularSystem(QRegError, ArithmeticError):
    """Quadric normal equations are too ill-conditioned to solve."""


class DegenerateQuadric(QRegError, ArithmeticError):
    """Quadric has an unbounded axis (vanishing eigenvalue or center constant)."""


class ZeroGradient(QRegError, ArithmeticError):
    pass


class PatchFailure(QRegError):
    """Wraps a fitting failure with the index of the point that was being fitted."""

    def __init__(self, point_index: int, cause: Exception):
        super().__init__(f"patch at point {point_index} failed: {cause}")
        self.point_index = point_index
        self.cause = cause


class NotDistinct(QRegError, ValueError):
    """A patch handed to the 1-point solver does not have three distinct axes."""


class NoEligibleCorrespondences(QRegError):
    pass


class ParseError(QRegError, ValueError):
    """Malformed input file. ``offset`` is a 1-based line (text) or byte offset (binary)."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        where = ""
        if path is not None:
            where += f"{path}: "
        if offset is not None:
            where += f"at offset {offset}: "
        super().__init__(where + message)
        self.offset = offset
        self.path = path


class InvalidSpec(QRegError, ValueError):
    pass


class ConfigError(QRegError, ValueError):
    pass
