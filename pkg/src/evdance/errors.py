"""Exception types shared across the package."""


class EvDanceError(Exception):
    """Base class for all package errors."""


class InvalidConfig(EvDanceError, ValueError):
    pass


# event io
class TruncatedRecord(EvDanceError, ValueError):
    pass


class CoordinateOutOfBounds(EvDanceError, ValueError):
    pass


class MalformedLine(EvDanceError, ValueError):
    def __init__(self, line: int, reason: str = ""):
        self.line = line
        msg = f"malformed line {line}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class MissingHeader(EvDanceError, ValueError):
    pass


class TooFewEvents(EvDanceError, ValueError):
    pass


class NonMonotonicTimestamp(UserWarning):
    """Warning only: real recordings contain timestamp resets."""


# representations
class EmptyStream(EvDanceError, ValueError):
    pass


class InvalidBinCount(EvDanceError, ValueError):
    pass


# autodiff / losses
class ShapeMismatch(EvDanceError, ValueError):
    pass


class NotADistribution(EvDanceError, ValueError):
    pass


class NotScalar(EvDanceError, ValueError):
    pass


class InvalidTemperature(EvDanceError, ValueError):
    pass


class EmptyOtherSet(EvDanceError, ValueError):
    pass


class BatchMismatch(EvDanceError, ValueError):
    pass


# files
class CorruptFile(EvDanceError, ValueError):
    pass


class VersionMismatch(EvDanceError, ValueError):
    pass


class DimensionMismatch(EvDanceError, ValueError):
    pass


# pipeline
class EmptyDataset(EvDanceError, ValueError):
    pass


class EmptyTestSet(EvDanceError, ValueError):
    pass


class LabelOutOfRange(EvDanceError, ValueError):
    pass


class EmptyMatrix(EvDanceError, ValueError):
    pass
