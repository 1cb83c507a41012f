"""Exception hierarchy shared by every darkisp module."""


class DarkIspError(Exception):
    """Base class for all library errors."""


# raw_io
class BadMagic(DarkIspError):
    pass


class TruncatedPayload(DarkIspError):
    pass


class InvalidHeader(DarkIspError):
    pass


class MissingSidecarField(DarkIspError):
    pass


class OddDimensions(DarkIspError):
    pass


class IoFailure(DarkIspError):
    pass


# tensor_engine / shared shape checks
class ShapeMismatch(DarkIspError, ValueError):
    pass


class NonFiniteInput(DarkIspError, ValueError):
    pass


# linear_isp
class NonPositiveGain(DarkIspError, ValueError):
    pass


class ImageTooSmall(DarkIspError, ValueError):
    pass


# nonlinear_isp
class IndexOutOfRange(DarkIspError, IndexError):
    pass


# self_boost
class NotSymmetric(DarkIspError, ValueError):
    pass


class DegenerateImageWarning(UserWarning):
    """All-zero Bayer input: the Gram matrix vanishes and the pseudo-target is zero."""


# synth_data
class SingularCCM(DarkIspError, ValueError):
    pass


class EmptySource(DarkIspError):
    pass


# trainer
class ManifestError(DarkIspError):
    pass


class NonFiniteLoss(DarkIspError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value
