"""Exception hierarchy.

Every error raised by the package derives from :class:`UEEGError`. The three
intermediate classes map onto CLI exit codes: :class:`DataError` (2) and
:class:`NumericalError` (3); anything else that is a usage problem exits 1.
"""


class UEEGError(Exception):
    pass


class DataError(UEEGError):
    pass


class NumericalError(UEEGError):
    pass


# tensor core
class ShapeMismatch(UEEGError, ValueError):
    pass


class DomainError(NumericalError, ValueError):
    pass


class AxisOutOfRange(UEEGError, IndexError):
    pass


class BoundsError(UEEGError, IndexError):
    pass


class NonFiniteInput(NumericalError, ValueError):
    pass


class NotScalarLoss(UEEGError, ValueError):
    pass


class DetachedLoss(UEEGError, ValueError):
    pass


class NonScalarOutput(UEEGError, ValueError):
    pass


# layers
class KernelLargerThanInput(ShapeMismatch):
    pass


class WindowLargerThanInput(ShapeMismatch):
    pass


class BatchTooSmall(UEEGError, ValueError):
    pass


class InvalidProbability(UEEGError, ValueError):
    pass


class EmptySequence(UEEGError, ValueError):
    pass


class InputTooSmall(ShapeMismatch):
    pass


# classical ml / metrics
class DimensionMismatch(ShapeMismatch):
    pass


class KExceedsTrainingSize(UEEGError, ValueError):
    pass


class LengthMismatch(UEEGError, ValueError):
    pass


class SingleClassInput(UEEGError, ValueError):
    pass


# data
class BadMagic(DataError):
    pass


class VersionUnsupported(DataError):
    pass


class ContainerShapeMismatch(DataError, ShapeMismatch):
    """Payload size disagrees with the manifest."""


class NonFiniteData(DataError):
    pass


class LabelOutOfRange(DataError, ValueError):
    pass


class SignalTooShort(DataError, ValueError):
    pass


class TooFewSamples(DataError, ValueError):
    pass


class InvalidSpec(DataError, ValueError):
    pass


class DatasetError(DataError):
    pass


class GeometryMismatch(DataError, ShapeMismatch):
    pass


class NonFiniteLoss(NumericalError):
    pass


class StratificationWarning(UserWarning):
    pass
