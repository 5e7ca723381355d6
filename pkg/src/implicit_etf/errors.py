"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are inconsistent with the requested operation."""


class ConstraintError(ValueError):
    """A matrix that must lie on the Stiefel manifold does not."""


class DomainError(ValueError):
    """An argument lies outside the domain where the quantity is defined."""


class MissingClassError(ValueError):
    """A class has no samples, so its mean is undefined."""


class DegenerateFeaturesError(ValueError):
    """All class means coincide, so the centred mean matrix cannot be normalised."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or lost rank."""


class SingularCurvatureError(NumericalError):
    """The implicit-function Jacobian is undefined: G is singular or A rank deficient."""
