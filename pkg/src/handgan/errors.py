"""Exception hierarchy shared by every handgan module."""


class HandGANError(Exception):
    """Base class for all errors raised by this package."""


class EmptyDataset(HandGANError):
    pass


class DecodeError(HandGANError):
    pass


class ShapeMismatch(HandGANError):
    pass


class ShapeError(HandGANError):
    pass


class CropTooLarge(HandGANError):
    pass


class InvalidBatchSize(HandGANError):
    pass


class MaskRequired(HandGANError):
    pass


class InvalidKernel(HandGANError):
    pass


class InvalidConfig(HandGANError):
    pass


class WeightLoadError(HandGANError):
    pass


class NonFiniteLoss(HandGANError):
    """Raised when a loss term is NaN or infinite; ``term`` names the culprit."""

    def __init__(self, term, value=float("nan")):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
        self.value = value


class InsufficientSamples(HandGANError):
    pass


class NumericalInstability(HandGANError):
    pass


class IncomparableFeatures(HandGANError):
    pass


class EmbeddingError(HandGANError):
    pass


class IncompatibleCheckpoint(HandGANError):
    pass
