"""Exception hierarchy shared by all engine modules."""


class EngineError(Exception):
    """Base class for every error raised by the engine."""


class DimensionMismatch(EngineError, ValueError):
    pass


class ZeroVector(EngineError, ValueError):
    pass


class EmptyInput(EngineError, ValueError):
    pass


class UnknownTrack(EngineError, KeyError):
    pass


class NonMonotonicFrame(EngineError, ValueError):
    pass


class OverlapError(EngineError, ValueError):
    pass


class EmptyDetections(EmptyInput):
    pass


class EmptyMemories(EmptyInput):
    pass


class EmptyTrack(EngineError, ValueError):
    pass


class RasterMismatch(EngineError, ValueError):
    pass


class InfeasibleShape(EngineError, ValueError):
    pass


class DivergenceError(EngineError, FloatingPointError):
    pass


class EmptyScene(EngineError, ValueError):
    pass


class DegenerateWindow(EngineError, ValueError):
    pass


class InvalidConfig(EngineError, ValueError):
    pass


class MissingArtifact(EngineError, FileNotFoundError):
    pass
