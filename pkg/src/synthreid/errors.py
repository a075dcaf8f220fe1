"""Exception hierarchy shared by every stage of the pipeline."""


class SynthReIDError(Exception):
    """Base class; the CLI reports ``type(err).__name__`` and exits 1."""


class BadConfig(SynthReIDError, ValueError):
    pass


class EmptyAttributeSet(SynthReIDError, ValueError):
    pass


class FormatError(SynthReIDError, ValueError):
    pass


class SizeMismatch(SynthReIDError, ValueError):
    pass


class ShapeMismatch(SynthReIDError, ValueError):
    pass


class EmptySlice(SynthReIDError, ValueError):
    pass


class BadK(SynthReIDError, ValueError):
    pass


class BadLabel(SynthReIDError, ValueError):
    pass


class DegenerateBatch(SynthReIDError, ValueError):
    pass


class NonFiniteLoss(SynthReIDError, ArithmeticError):
    pass


class DimMismatch(SynthReIDError, ValueError):
    pass


class NoRelevant(SynthReIDError, ValueError):
    pass


class EmptyGalleryAfterExclusion(SynthReIDError, ValueError):
    pass


class IoError(SynthReIDError, OSError):
    pass
