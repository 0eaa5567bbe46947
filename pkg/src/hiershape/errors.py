"""Exception types raised across the package."""


class ShapeError(Exception):
    """Base class for all package errors."""


class DegenerateShape(ShapeError, ValueError):
    """A point set has (numerically) zero size, or an alignment is undefined."""


class SingularCovariance(ShapeError, ValueError):
    """A ridged covariance could not be factorized."""


class NonFiniteEnergy(ShapeError, FloatingPointError):
    """A log density or its gradient evaluated to NaN or infinity."""


class InsufficientData(ShapeError, ValueError):
    """Too few shapes for the requested operation."""


class ParseError(ShapeError, ValueError):
    """Malformed input file. Carries the offending path and line number."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
