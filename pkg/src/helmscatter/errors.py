"""Exception types shared across the package.

The CLI maps these onto process exit codes, so the distinctions matter:
input/geometry problems are user-fixable, separation violations mean the
requested ensemble is outside the method's validity region, and convergence
failures mean the iterative solver gave up.
"""


class CapabilityError(ValueError):
    """Requested order/argument is outside the supported numerical range."""


class GeometryError(ValueError):
    """Invalid scatterer, mesh, or arrangement geometry."""


class MeshFormatError(ValueError):
    """Malformed mesh text document."""


class SeparationError(ValueError):
    """Obstacle expansion disks overlap; the coupled system is invalid."""


class ConvergenceError(RuntimeError):
    """Iterative solver failed to reach the requested tolerance."""
