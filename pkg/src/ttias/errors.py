"""Exception types raised across the package."""


class TtiasError(Exception):
    """Base class for all package errors."""


class InvalidDimensionError(TtiasError, ValueError):
    pass


class DomainError(TtiasError, ValueError):
    pass


class AssemblyError(TtiasError):
    pass


class DegenerateGeometryError(TtiasError):
    pass


class KnotConfigurationError(TtiasError):
    pass


class ToleranceUnreachableError(TtiasError):
    pass


class ShapeMismatchError(TtiasError, ValueError):
    pass


class SizeCapError(TtiasError):
    pass


class SolverError(TtiasError):
    """An inner solver failed to reach its tolerance."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class VarianceDomainError(TtiasError, ValueError):
    pass


class HyperModelError(TtiasError, ValueError):
    pass


class ConfigError(TtiasError, ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
