"""Exception types shared across the package."""


class NldError(Exception):
    """Base class for all package errors."""


class NotConverged(NldError):
    """Iterative solve failed to reach its tolerance (e.g. reducible/periodic chain)."""


class CholeskyFailure(NldError):
    """A covariance matrix is not positive definite."""


class NonScalarRoot(NldError):
    """backward() was asked to differentiate a non-scalar node."""


class ShapeMismatch(NldError):
    """Operand shapes are inconsistent with the declared architecture."""


class NonFinite(NldError):
    """A NaN/Inf appeared where finite values are required (solver instability)."""


class SingularDiffusion(NldError):
    """Diffusion coefficient too close to zero; the path KL is undefined."""


class TooManySkips(NldError):
    """More than the allowed fraction of batches produced non-finite losses."""


class NonPositiveDefiniteHessian(NldError):
    """A Hessian at a reported minimum is not positive definite."""


class DegeneratePoints(NldError):
    """Points are affinely dependent; they do not span a plane."""


class LengthMismatch(NldError):
    """Two vectors that must have equal length do not."""


class UsageError(NldError):
    """Bad configuration or arguments; maps to CLI exit code 2."""
