"""Exception types shared across the package."""


class Fe2RomError(Exception):
    """Base class for all package errors."""


class MeshError(Fe2RomError):
    """Invalid mesh topology, geometry, or boundary data."""


class SingularDeformationError(Fe2RomError):
    """det(F) <= 0 at a material or Gauss point."""

    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class DivergenceError(Fe2RomError):
    """Newton iteration failed to converge within the iteration budget."""

    def __init__(self, message, last_residual=None):
        super().__init__(message)
        self.last_residual = last_residual


class LinearSolveError(Fe2RomError):
    """Singular or numerically unusable tangent system."""


class EmptyBasisError(Fe2RomError):
    """POD truncation of a rank-0 factorization."""


class ConfigError(Fe2RomError):
    """Invalid configuration file or geometry description."""


class IntegrityError(Fe2RomError):
    """Persisted file failed a content-hash or format check."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class SimulationBlowUpError(Fe2RomError):
    """Non-finite macroscale state during time integration."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
