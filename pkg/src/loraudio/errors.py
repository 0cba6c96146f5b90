"""Exception types shared across the toolkit."""


class LoraudioError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(LoraudioError, ValueError):
    """Bad input, bad configuration, or a violated precondition."""


class NotWav(ValidationError):
    pass


class UnsupportedChannels(ValidationError):
    pass


class UnsupportedBitDepth(ValidationError):
    pass


class SampleRateMismatch(ValidationError):
    pass


class MalformedLine(ValidationError):
    def __init__(self, line_no: int, text: str = ""):
        self.line_no = line_no
        super().__init__(f"malformed line {line_no}: {text!r}")


class UnknownLabel(ValidationError):
    pass


class EmptyClass(ValidationError):
    pass


class OneClassOnly(ValidationError):
    pass


class TooShort(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class NonScalarLoss(ValidationError):
    pass


class MissingGrad(ValidationError):
    pass


class UnknownAdapterTarget(ValidationError):
    pass


class RankTooLarge(ValidationError):
    pass


class BadMagic(LoraudioError):
    pass


class TruncatedFile(LoraudioError):
    pass


class FingerprintMismatch(LoraudioError):
    """An adapter set was paired with a base checkpoint it was not trained on."""


class BaseMutated(LoraudioError):
    """Internal consistency failure: frozen base weights changed during adapter training."""
