"""Exception types shared across the package."""


class DiracflowError(Exception):
    """Base class for all package errors."""


class ConfigError(DiracflowError):
    """Invalid or malformed run configuration."""


class TubeViolation(DiracflowError):
    """Point lies outside the tubular neighborhood of the target."""


class NotTangent(DiracflowError):
    """Vector fails the tangency check at the given base point."""


class TangencyViolation(DiracflowError):
    """Twisted spinor fails the tangency constraint along its base map."""


class BeyondInjectivity(DiracflowError):
    """Geodesic construction requested beyond the injectivity radius."""


class KernelNotMinimal(DiracflowError):
    """Kernel of the Dirac operator along the map is not minimal.

    Carries the measured complex kernel dimension and gap; this is the
    singular-time signal consumed by the flow driver.
    """

    def __init__(self, kernel_dim, gap, message=None):
        self.kernel_dim = kernel_dim
        self.gap = gap
        super().__init__(
            message or f"kernel dim {kernel_dim} (want 2), gap {gap:.3e}"
        )


class ProjectionDegenerate(DiracflowError):
    """Projection of the reference spinor onto the kernel is too small."""


class EigensolveFailure(DiracflowError):
    """Eigensolver failed to converge; grid or conditioning problem."""


class StepRejected(DiracflowError):
    """Time step rejected repeatedly on energy increase."""


class RestartExhausted(DiracflowError):
    """Restart policy ran out of attempts without an acceptable candidate."""


class ContinuationAborted(DiracflowError):
    """Alpha continuation aborted; partial results attached."""

    def __init__(self, message, partial=None):
        self.partial = partial
        super().__init__(message)


class RadiusTooSmall(DiracflowError):
    """Ball radius below the minimum resolvable size."""


class AngleJumpTooLarge(DiracflowError):
    """Angle increment >= pi between neighbors; map under-resolved."""


class DegreeNotNearInteger(DiracflowError):
    """Signed-area degree sum not close to an integer."""
