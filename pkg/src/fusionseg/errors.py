"""Exception types. Each carries the CLI exit code it maps to."""


class FusionSegError(Exception):
    exit_code = 2


class ShapeMismatch(FusionSegError, ValueError):
    pass


class NonIntegralOutput(ShapeMismatch):
    pass


class NegativeOutput(ShapeMismatch):
    pass


class OddSpatialDim(ShapeMismatch):
    pass


class MissingInput(FusionSegError, ValueError):
    pass


class MissingForwardState(FusionSegError, RuntimeError):
    pass


class DegenerateBatch(FusionSegError, ValueError):
    pass


class LabelOutOfRange(FusionSegError, ValueError):
    pass


class AllPixelsIgnored(FusionSegError, ValueError):
    pass


class EpochOutOfRange(FusionSegError, IndexError):
    pass


class UnknownNetwork(FusionSegError, KeyError):
    pass


class CorruptCheckpoint(FusionSegError, ValueError):
    pass


class FormatError(FusionSegError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyRaster(FusionSegError, ValueError):
    pass


class SceneTooSmall(FusionSegError, ValueError):
    pass


class ZeroStd(FusionSegError, ValueError):
    pass


class InvalidFractions(FusionSegError, ValueError):
    pass


class EmptyMatrix(FusionSegError, ValueError):
    pass


class BandCountMismatch(FusionSegError, ValueError):
    pass


class NonFiniteError(FusionSegError, FloatingPointError):
    """Raised when an activation, loss or gradient stops being finite."""

    exit_code = 3

    def __init__(self, message, epoch=None, step=None, layer=None):
        parts = [message]
        if epoch is not None:
            parts.append(f"epoch={epoch}")
        if step is not None:
            parts.append(f"step={step}")
        if layer is not None:
            parts.append(f"layer={layer}")
        super().__init__(" ".join(parts))
        self.epoch, self.step, self.layer = epoch, step, layer


class DegenerateDataWarning(UserWarning):
    pass
