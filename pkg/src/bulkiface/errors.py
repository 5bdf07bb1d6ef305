"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain where an operation is defined."""


class GeometryError(ValueError):
    """Invalid geometry descriptor, mesh request or reflection frame."""


class CoverageError(GeometryError):
    """Partition-of-unity anchors do not cover the interface."""

    def __init__(self, message, uncovered=None):
        super().__init__(message)
        self.uncovered = uncovered


class SolverError(RuntimeError):
    """The time integrator could not continue."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class ConfigError(ValueError):
    """Unreadable or inconsistent scenario / run configuration."""
