"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class MovingHWError(Exception):
    """Base error carrying the module and operation it was raised from."""

    module: str = ""
    operation: str = ""

    def __init__(self, message: str, *, module: str = "", operation: str = "") -> None:
        """Store the message together with its module/operation context."""
        super().__init__(message)
        if module:
            self.module = module
        if operation:
            self.operation = operation

    def context(self) -> str:
        """Return a `module.operation` label for reports."""
        return ".".join(part for part in (self.module, self.operation) if part)

    def __str__(self) -> str:
        """Prefix the message with its context when one is known."""
        message = super().__str__()
        label = self.context()
        return f"[{label}] {message}" if label else message


class SingularJacobian(MovingHWError):
    """det(∂φ/∂x) is not positive, or not spatially constant, at an evaluated point."""

    module = "geometry_kernel"


class DegenerateLevelSet(MovingHWError):
    """The boundary level-set gradient vanishes where a normal is requested."""

    module = "geometry_kernel"


class InvalidRadii(MovingHWError):
    """Radii handed to a mesh generator violate their ordering."""

    module = "mesh_disc"


class InvalidMesh(MovingHWError):
    """Mesh topology or cell orientation failed validation."""

    module = "mesh_disc"


class UnknownLabel(MovingHWError):
    """A boundary or cut label does not exist on the mesh."""

    module = "mesh_disc"


class SolverDivergence(MovingHWError):
    """An iterative or direct linear solve did not reach its tolerance."""


class DependentBasis(MovingHWError):
    """A Gram–Schmidt denominator collapsed below its threshold."""


class NonSolenoidalInput(MovingHWError):
    """A field that must be divergence-free is not."""

    module = "hw_decomposition"


class BadParameters(MovingHWError):
    """Cut-off parameters violate the collar/mollifier constraints."""

    module = "leray_cutoff"


class FluxViolation(MovingHWError):
    """Boundary data does not satisfy the general flux condition."""

    module = "galerkin_periodic"


class BlowupDetected(MovingHWError):
    """Kinetic energy left the admissible envelope during integration."""

    module = "galerkin_periodic"


class NoConvergence(MovingHWError):
    """The Poincaré-map fixed point iteration ran out of iterations."""

    module = "galerkin_periodic"

    def __init__(self, message: str, residual_history: list[float] | None = None, **kwargs: str) -> None:
        """Keep the residual history next to the message."""
        super().__init__(message, **kwargs)
        self.residual_history = list(residual_history or [])


class ParseError(MovingHWError):
    """Configuration text is malformed; carries offending line numbers."""

    module = "cli_io"
    operation = "parse_config"

    def __init__(self, message: str, lines: list[int] | None = None) -> None:
        """Record the offending line numbers."""
        super().__init__(message)
        self.lines = list(lines or [])


class ValidationError(MovingHWError):
    """Configuration values are out of range; aggregates every violation."""

    module = "cli_io"
    operation = "parse_config"

    def __init__(self, violations: list[str]) -> None:
        """Join all violations into one message."""
        super().__init__("; ".join(violations))
        self.violations = list(violations)
