"""Exception types raised across the harness.

Every error carries enough context (field, scene, channel) in its message to
locate the offending input without a traceback.
"""


class IceBenchError(Exception):
    """Base class for all harness errors."""


class ConfigError(IceBenchError, ValueError):
    pass


# scene_store
class SceneError(IceBenchError):
    pass


class MissingFile(SceneError, FileNotFoundError):
    pass


class PayloadSizeMismatch(SceneError, ValueError):
    pass


class UnknownDtype(SceneError, ValueError):
    pass


class OrphanPolygonId(SceneError, ValueError):
    pass


class MalformedDate(SceneError, ValueError):
    pass


class InvalidScene(SceneError, ValueError):
    pass


class UnknownChannel(SceneError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class IoFailure(IceBenchError, OSError):
    pass


# preprocess
class IncompatibleGrid(IceBenchError, ValueError):
    pass


class EmptyOutput(IceBenchError, ValueError):
    pass


class DegenerateChannel(IceBenchError, ValueError):
    pass


class MissingStats(IceBenchError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


# sampling
class SceneTooSmall(IceBenchError, ValueError):
    pass


# partition
class UnknownLocation(IceBenchError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class InsufficientScenes(IceBenchError, ValueError):
    pass


# metrics
class ShapeMismatch(IceBenchError, ValueError):
    pass


class EmptySupport(IceBenchError, ValueError):
    pass


class DomainError(IceBenchError, ValueError):
    pass


# refmodels
class NonFiniteLoss(IceBenchError, FloatingPointError):
    pass


class UntrainedModel(IceBenchError, RuntimeError):
    pass


class VersionMismatch(IceBenchError, ValueError):
    pass


class CorruptPayload(IceBenchError, ValueError):
    pass


class AllNonFinite(IceBenchError, ValueError):
    pass


class SingleClassTrain(UserWarning):
    """Warning: the training set holds one class; a constant predictor is returned."""


# synthgen
class SpecError(IceBenchError, ValueError):
    pass
