"""Exception hierarchy shared across the pipeline."""


class ReconError(Exception):
    """Base class for all library errors."""


class DataError(ReconError):
    """Input data is malformed or unusable."""


class PipelineFailure(ReconError):
    """A stage ran but produced nothing usable downstream."""


class MalformedFile(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyCloud(DataError):
    pass


class EmptyMesh(DataError):
    pass


class EmptyModel(DataError):
    pass


class TooFewSamples(DataError):
    pass


class CoincidentPoints(DataError):
    pass


class DegeneratePair(DataError):
    pass


class EmptySpace(ReconError):
    pass


class NoHypotheses(PipelineFailure):
    pass


class Diverged(ReconError):
    pass


class DuplicateCamera(ReconError):
    pass


class DisconnectedGraph(PipelineFailure):
    pass


class SingularNormalEquations(ReconError):
    def __init__(self, message, retries=0):
        super().__init__(f"{message} (after {retries} damping retries)")
        self.retries = retries


class NonPositiveSceneArea(DataError):
    pass


class ConfigError(DataError):
    pass
