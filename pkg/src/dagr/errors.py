"""Exception hierarchy shared by every module."""


class DagrError(ValueError):
    """Base class for all domain errors raised by the package."""


class NonFiniteInput(DagrError):
    pass


class BatchTooSmall(DagrError):
    pass


class NonPositiveTemperature(DagrError):
    pass


class PotentialNotMonotone(DagrError):
    pass


class SingleModality(DagrError):
    pass


class DimensionMismatch(DagrError):
    pass


class DegenerateNorm(DagrError):
    pass


class GroupMismatch(DagrError):
    pass


class NonFiniteGradient(DagrError):
    pass


class ShapeMismatch(DagrError):
    pass


class LabelOutOfRange(DagrError):
    pass


class TapeConsumed(DagrError):
    pass


class TrivialNullSpace(DagrError):
    pass


class SingleClass(DagrError):
    pass


class EmptySample(DagrError):
    pass


class KOutOfRange(DagrError):
    pass


class ConfigError(DagrError):
    """Raised for anything wrong with a config file; ``key`` names the culprit."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class UnknownKey(ConfigError):
    pass


class RangeError(ConfigError):
    pass


class ParseError(ConfigError):
    pass


class CheckFailed(DagrError):
    pass


class ZeroTrace(DagrError):
    pass


class IoError(DagrError):
    """Unreadable, malformed or unwritable artifact file."""
