"""Exception types shared across the package.

Every error that names an offending asset carries it in ``.asset`` so
callers (CLI, HTTP service) can surface it without parsing messages.
"""


class StillflowError(Exception):
    """Base class for all package errors."""


class SceneError(StillflowError):
    def __init__(self, message, asset=None):
        super().__init__(message)
        self.asset = asset


class MissingFile(SceneError):
    pass


class DimensionMismatch(SceneError):
    pass


class NonPositiveDepth(SceneError):
    pass


class BadMagic(StillflowError):
    pass


class TruncatedFile(StillflowError):
    pass


class EmptySequence(StillflowError):
    pass


class NoHints(StillflowError):
    pass


class EmptyFluidRegion(StillflowError):
    pass


class DegenerateTriangle(StillflowError):
    pass


class SingularLift(StillflowError):
    pass


class SolverDiverged(StillflowError):
    pass


class SingularSystem(StillflowError):
    pass


class AllHoles(StillflowError):
    pass


class ObjectOutOfFrame(StillflowError):
    pass
