"""Exception hierarchy shared by all modules."""


class FPMError(Exception):
    """Base class for solver errors."""


class GeometryError(FPMError):
    """Invalid point set, partition or segment."""


class SupportError(FPMError):
    """A point does not have enough neighbours to build its weights."""


class SingularSupportError(FPMError):
    """Collocation system of a support is singular or degenerate."""


class MaterialError(FPMError):
    """Inconsistent or non-physical material parameters."""


class AssemblyError(FPMError):
    """Missing state, inconsistent boundary data or theory mismatch."""


class NumericalError(FPMError):
    """Linear solve breakdown or non-convergence."""


class ConfigError(FPMError):
    """Problem description failed validation."""


class CrackError(FPMError):
    """Invalid crack operation."""
