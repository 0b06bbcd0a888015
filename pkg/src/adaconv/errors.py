"""Exception types shared across the package."""


class AdaConvError(Exception):
    """Base class for all package errors."""


class ShapeError(AdaConvError, ValueError):
    pass


class ConfigError(AdaConvError, ValueError):
    pass


class FormatError(AdaConvError, ValueError):
    pass


class StateError(AdaConvError, RuntimeError):
    pass


class DatasetError(AdaConvError, RuntimeError):
    pass


class TrainingError(AdaConvError, RuntimeError):
    pass


class ManifestParseError(FormatError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno
