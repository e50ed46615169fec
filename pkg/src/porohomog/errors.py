"""Exception types raised across the package."""


class PorohomogError(Exception):
    """Base class for all package errors."""


class SpecError(PorohomogError, ValueError):
    """Invalid domain or study specification."""


class GeometryError(PorohomogError, ValueError):
    """Inclusion geometry violates a containment or positivity requirement."""


class MeshError(PorohomogError, RuntimeError):
    def __init__(self, message, cell=None):
        super().__init__(message if cell is None else f"{message} (cell {cell})")
        self.cell = cell


class SpaceError(PorohomogError, ValueError):
    """Inconsistent finite-element space construction (constraints, tags)."""


class SolverError(PorohomogError, RuntimeError):
    def __init__(self, message, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


class LocationError(PorohomogError, ValueError):
    def __init__(self, message, points=None):
        super().__init__(message)
        self.points = points


class ConfigError(PorohomogError, ValueError):
    """Study configuration failed validation."""
