"""Exception hierarchy shared across the package."""


class SlabReconError(Exception):
    """Base class for all data errors raised by slabrecon."""


class SingularTransform(SlabReconError):
    pass


class ModeMismatch(SlabReconError):
    pass


class DimMismatch(SlabReconError, ValueError):
    pass


class EmptyForeground(SlabReconError):
    pass


class NoValidCrop(SlabReconError):
    pass


class MissingGroundTruth(SlabReconError):
    pass


class AllBackground(SlabReconError):
    pass


class NonpositivePixelSize(SlabReconError, ValueError):
    pass


class InsufficientPoints(SlabReconError):
    pass


class NumericalFailure(SlabReconError):
    pass


class EmptyMask(SlabReconError):
    pass


class ZeroReferenceVolume(SlabReconError):
    pass


class ConstantInput(SlabReconError):
    pass


class CorruptHeader(SlabReconError):
    pass


class LengthMismatch(SlabReconError):
    pass


class UnsupportedDtype(SlabReconError):
    pass


class UnsupportedNifti(SlabReconError):
    pass


class CorruptFile(SlabReconError):
    pass
