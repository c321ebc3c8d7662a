"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class DegenerateFaceError(ValidationError):
    """Triangle has (near) zero area."""


class SingularCovarianceError(ValidationError):
    """Gaussian scale has a component too small to invert."""


class RenderStateError(RuntimeError):
    """Backward pass requested without retained fragments."""
