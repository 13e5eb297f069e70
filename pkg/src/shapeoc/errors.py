"""Exception types raised across the package."""


class ShapeOCError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ShapeOCError, ValueError):
    pass


class UnsupportedDimensionError(InvalidInputError):
    pass


class DegenerateGeometryError(ShapeOCError, ValueError):
    pass


class SingularConstraintError(ShapeOCError, ArithmeticError):
    """Multiplier system could not be factorized even after regularization."""

    def __init__(self, message, condition=float("inf")):
        super().__init__(message)
        self.condition = condition


class BlowUpError(ShapeOCError, FloatingPointError):
    """A trajectory left the finite range during integration."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class SchemaError(ShapeOCError, ValueError):
    """A config or data file does not match its schema."""

    def __init__(self, message, field=None, line=None):
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.field = field
        self.line = line
