"""Exception and warning types raised across the pipeline."""


class VoroUDFError(Exception):
    """Base class for all fatal errors."""


class EmptyMeshError(VoroUDFError):
    pass


class NonConvergentError(VoroUDFError):
    pass


class NoIntersectionError(VoroUDFError):
    pass


class ProjectionFailureError(VoroUDFError):
    pass


class InfeasiblePolytopeError(VoroUDFError):
    pass


class ZeroWidthError(VoroUDFError):
    pass


class NoManifoldPairError(VoroUDFError):
    pass


class MeshFormatError(VoroUDFError):
    """Raised on malformed OBJ/PLY/grid input. Carries a line number when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class VoroUDFWarning(UserWarning):
    """Non-fatal condition; the pipeline continues and records it."""


class DisconnectedSeedWarning(VoroUDFWarning):
    pass


class StalledThinningWarning(VoroUDFWarning):
    pass


class UnreachableNodesWarning(VoroUDFWarning):
    pass


class MaxIterationsWarning(VoroUDFWarning):
    pass
