"""Exception hierarchy shared by every pyrogrid module."""


class PyrogridError(Exception):
    """Base class for all library errors."""


class ShapeError(PyrogridError, ValueError):
    pass


class NonScalarLoss(PyrogridError, ValueError):
    pass


class NonFiniteValue(PyrogridError, ValueError):
    pass


class InsufficientData(PyrogridError):
    """Raised when a buffer cannot yet serve the requested batch."""


class MissingGroundTruth(PyrogridError):
    pass


class LengthMismatch(PyrogridError, ValueError):
    pass


# file formats
class FormatError(PyrogridError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class RangeViolation(FormatError):
    pass


# data preparation
class EmptyInput(PyrogridError, ValueError):
    pass


class SplitOutOfRange(PyrogridError, ValueError):
    pass


class EmptyTrain(SplitOutOfRange):
    pass


class SplitMismatch(PyrogridError, ValueError):
    pass


class DegenerateChannel(UserWarning):
    """Warning: a channel was constant over the normalisation window."""


class ConfigError(PyrogridError, ValueError):
    pass


class EmptyRun(PyrogridError):
    pass
