"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the domain of an operation (shape, manifold, range)."""


class NumericalError(ArithmeticError):
    """An iterative routine failed to converge or produced non-finite values."""


class DegenerateGeodesicError(DomainError):
    """The shortest geodesic between two points is not unique (antipodal points)."""


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, offset, message):
        self.offset = offset
        super().__init__(f"at byte offset {offset}: {message}")
