"""Exception hierarchy shared by every crackdet module.

Each exception carries a ``kind`` used by the CLI to pick an exit code:
``data`` errors exit with 2, ``numeric`` failures with 3.
"""


class CrackDetError(Exception):
    kind = "data"


# imagecore
class UnsupportedFormat(CrackDetError):
    pass


class CorruptFile(CrackDetError):
    pass


class NonFiniteValue(CrackDetError):
    kind = "numeric"


class IoFailure(CrackDetError):
    pass


# thresholding
class DegenerateHistogram(CrackDetError):
    kind = "numeric"


class ThresholdOutOfRange(CrackDetError):
    pass


class BothMeansZero(CrackDetError):
    kind = "numeric"


# metrics
class DimensionMismatch(CrackDetError):
    pass


class UndefinedMeasure(CrackDetError):
    kind = "numeric"


class NoTruePositives(CrackDetError):
    kind = "numeric"


# autodiff / network
class ShapeMismatch(CrackDetError):
    pass


class IndexOutOfWindow(CrackDetError):
    pass


class ConfigInvalid(CrackDetError):
    pass


class CheckpointMismatch(CrackDetError):
    pass


class DatasetEmpty(CrackDetError):
    pass


class NonFiniteLoss(CrackDetError):
    kind = "numeric"


# cli
class EmptySample(CrackDetError):
    pass


class WindowTooSmall(CrackDetError):
    pass
