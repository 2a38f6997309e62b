"""Exception hierarchy shared by all modules."""


class HiermatchError(Exception):
    """Base class for data errors raised by the library."""


class OutOfBoundsError(HiermatchError):
    pass


class EmptyOutputError(HiermatchError):
    pass


class ImageTooSmallError(HiermatchError):
    pass


class DimMismatchError(HiermatchError):
    pass


class HierarchyTooShallowError(HiermatchError):
    pass


class BadMagicError(HiermatchError):
    pass


class TruncatedFileError(HiermatchError):
    pass


class DimOverflowError(HiermatchError):
    pass


class NoValidNegativeError(HiermatchError):
    pass


class EmptyDatasetError(HiermatchError):
    pass


class EmptyCandidateSetError(HiermatchError):
    pass


class NoSeedsError(HiermatchError):
    pass


class EmptyInputError(HiermatchError):
    pass


class LengthMismatchError(HiermatchError):
    pass


class EmptyMaskError(HiermatchError):
    pass


class DegenerateTransformError(HiermatchError):
    pass


class DimensionMismatchError(HiermatchError):
    """Reference and target images differ in size."""


class ConfigError(HiermatchError):
    pass
