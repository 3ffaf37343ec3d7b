"""Exception hierarchy shared by every stage of the pipeline."""


class MVTrackError(Exception):
    """Base class for all package errors."""


class ValidationError(MVTrackError, ValueError):
    """Bad user input: configs, files, shapes. CLI maps these to exit code 1."""


class ShapeMismatch(ValidationError):
    pass


class ConfigInvalid(ValidationError):
    pass


class FormatError(ValidationError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class MissingFrame(ValidationError):
    pass


class ChecksumMismatch(ValidationError):
    pass


class PositionOutOfGrid(ValidationError):
    pass


class DepthNonPositive(MVTrackError):
    """Point lies behind (or on) the camera plane."""


class NaNDetected(MVTrackError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class GraphConsumed(MVTrackError, RuntimeError):
    pass
