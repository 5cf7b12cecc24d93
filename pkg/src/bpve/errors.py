"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of the requested operation."""


class DegenerateEnvironmentError(ValueError):
    """An offspring law or environment makes the requested quantity undefined."""


class HypothesisViolationError(ValueError):
    """A limit profile does not satisfy the assumptions needed for a limit law."""


class StructuralError(ValueError):
    """Genealogical input data is internally inconsistent."""


class AbsoluteContinuityError(ValueError):
    """A depth law assigns zero probability where the target measure has mass."""


class ResourceLimitError(RuntimeError):
    """A simulation exceeded a configured population or enumeration cap."""


class EnumerationLimitError(ResourceLimitError):
    """An exact enumeration would exceed its configured size guard."""
