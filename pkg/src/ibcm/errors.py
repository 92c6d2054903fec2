"""Exception hierarchy shared by all modules."""


class IBCMError(Exception):
    """Base class for library errors."""


class DomainError(IBCMError, ValueError):
    """A parameter or point lies outside the admissible domain."""


class UnsupportedDegreeError(IBCMError, ValueError):
    pass


class InvalidRefinementError(IBCMError, ValueError):
    pass


class IncompatibilityError(IBCMError, ValueError):
    pass


class InversionError(IBCMError):
    """Point inversion failed; ``best`` holds ``(parameter, distance)``."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class MalformedLoopError(IBCMError, ValueError):
    pass


class UnsupportedConfigurationError(IBCMError, ValueError):
    pass


class FitError(IBCMError):
    pass


class DecompositionError(IBCMError):
    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class DegenerateCellError(IBCMError):
    pass


class InterfaceConstructionError(IBCMError):
    pass


class RegularityError(IBCMError, ValueError):
    pass


class ProjectionCollisionError(IBCMError):
    pass


class PreconditionError(IBCMError, ValueError):
    pass


class EmptyDomainError(IBCMError):
    pass


class NonconformingInterfaceError(IBCMError):
    pass


class SpecError(IBCMError, ValueError):
    """Problem specification is incomplete or inconsistent."""


class SolverError(IBCMError):
    pass
