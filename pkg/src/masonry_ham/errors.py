"""Exception types shared across the package."""


class MasonryHamError(Exception):
    """Base class for package errors."""


class ParameterError(MasonryHamError, ValueError):
    """A material, interface or prior parameter violates its admissible range."""


class DomainError(MasonryHamError, ValueError):
    """A state value lies outside the constitutive model's validity range."""


class MeshError(MasonryHamError, ValueError):
    """Mesh generation input or mesh content is invalid."""


class ConfigError(MasonryHamError, ValueError):
    """A run configuration file is malformed or inconsistent."""


class ConvergenceError(MasonryHamError, RuntimeError):
    """Iterative solve failed; carries the iteration trace for diagnostics."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class StepRejection(MasonryHamError, RuntimeError):
    """Signal that the current time step must be rejected and retried smaller."""
