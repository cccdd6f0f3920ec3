"""Structured exceptions. Every failure the package raises on purpose derives from ObrgError."""


class ObrgError(Exception):
    """Base class; `exit_code` is what the CLI returns when this escapes."""

    exit_code = 1


class DimensionError(ObrgError, ValueError):
    exit_code = 2


class MaskError(ObrgError, ValueError):
    exit_code = 2


class NumericError(ObrgError, ArithmeticError):
    def __init__(self, message, name=None):
        super().__init__(message if name is None else f"{name}: {message}")
        self.name = name


class SequenceError(ObrgError, ValueError):
    exit_code = 2


class LossError(ObrgError, ValueError):
    exit_code = 2


class CaptionParseError(ObrgError, ValueError):
    exit_code = 2


class EditError(ObrgError, ValueError):
    exit_code = 2


class DegenerateEmbeddingError(ObrgError, ValueError):
    pass


class ScheduleError(ObrgError, ValueError):
    exit_code = 2


class ConfigError(ObrgError, ValueError):
    exit_code = 2


class CompatibilityError(ObrgError):
    exit_code = 3


class CorruptionError(ObrgError):
    exit_code = 3
