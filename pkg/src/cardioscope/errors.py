"""Exception hierarchy shared by every pipeline stage."""


class CardioscopeError(Exception):
    """Base class; the CLI maps subclasses onto exit codes."""


# volume / manifest I/O
class VolumeIOError(CardioscopeError):
    pass


class MissingFile(VolumeIOError, FileNotFoundError):
    pass


class MalformedHeader(VolumeIOError):
    pass


class NonPositiveSpacing(VolumeIOError, ValueError):
    pass


class UnwritablePath(VolumeIOError, PermissionError):
    pass


class ManifestError(CardioscopeError, ValueError):
    pass


class DuplicateSubjectId(ManifestError):
    pass


class UnknownLabel(ManifestError):
    pass


class MissingTruth(ManifestError):
    pass


class EmptyCohort(CardioscopeError, ValueError):
    pass


# phantom
class InvalidParams(CardioscopeError, ValueError):
    pass


# locator
class AxisExtentZero(CardioscopeError, ValueError):
    pass


class NoPositiveSlices(CardioscopeError):
    def __init__(self, axis, message=None):
        self.axis = axis
        super().__init__(message or f"no slice reached the threshold on axis {axis}")


class BBoxOutOfRange(CardioscopeError, IndexError):
    pass


# preprocessing
class DegenerateVolume(CardioscopeError, ValueError):
    pass


class ValueOutOfClipRange(CardioscopeError, ValueError):
    pass


class OversizeInput(CardioscopeError, ValueError):
    pass


# autoencoder / losses / training
class InvalidConfig(CardioscopeError, ValueError):
    pass


class ShapeMismatch(CardioscopeError, ValueError):
    pass


class LengthMismatch(CardioscopeError, ValueError):
    pass


class NonFiniteActivation(CardioscopeError, FloatingPointError):
    pass


class NonFiniteLoss(CardioscopeError, FloatingPointError):
    def __init__(self, step, checkpoint=None):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {checkpoint}")


class ExtractorUnavailable(CardioscopeError, FileNotFoundError):
    pass


# classifiers
class SingleClassTraining(CardioscopeError, ValueError):
    pass


class WidthMismatch(CardioscopeError, ValueError):
    pass


class EmptyGrid(CardioscopeError, ValueError):
    pass


# evaluation
class InsufficientClassMembers(CardioscopeError, ValueError):
    pass


class SingleClassLabels(CardioscopeError, ValueError):
    pass


# cli
class ConfigError(CardioscopeError, ValueError):
    pass


class MissingUpstreamArtifact(CardioscopeError):
    pass
