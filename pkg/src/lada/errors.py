"""Exception hierarchy shared by every module."""


class LadaError(Exception):
    """Base class for all package errors."""


class ParseError(LadaError, ValueError):
    pass


class ConfigError(LadaError, ValueError):
    pass


class EmptyManifestError(LadaError, ValueError):
    pass


class SchemaError(LadaError, ValueError):
    """A manifest or detections file violates its schema.

    ``line`` is the 1-based line number of the offending record when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(LadaError, ValueError):
    pass


class StructureError(LadaError, ValueError):
    pass


class NoGroundTruthError(LadaError, ValueError):
    """Average precision is undefined when no ground truth exists."""
