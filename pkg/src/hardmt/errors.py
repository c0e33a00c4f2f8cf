"""Exception hierarchy shared by every stage of the pipeline."""


class HardMTError(Exception):
    """Base class for all package errors."""


class ConfigError(HardMTError, ValueError):
    pass


class ValidationError(HardMTError, ValueError):
    pass


class FormatError(HardMTError, ValueError):
    """A binary or text file does not follow its declared layout."""


class TruncationError(FormatError):
    pass


class ShapeError(HardMTError, ValueError):
    pass


class NumericalError(HardMTError, FloatingPointError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class DecodeError(HardMTError, ValueError):
    def __init__(self, message, positions=()):
        super().__init__(message)
        self.positions = list(positions)
