"""Exception taxonomy shared by all modules."""


class SoftSphereError(Exception):
    """Base class for library errors."""


class ConfigurationError(SoftSphereError):
    """Invalid configuration value (dimensions, planes, parameter ranges)."""


class ValidationError(SoftSphereError):
    """Input data violates an invariant (NaN fields, bad radii, dim mismatch)."""


class FormatError(SoftSphereError):
    """A file does not conform to its declared on-disk format."""


class ContractViolation(SoftSphereError):
    """Mismatched pipeline artifacts, e.g. a stale backward buffer."""


class DivergenceError(SoftSphereError):
    """Optimization produced a non-finite loss."""
