"""Exception hierarchy shared across the pipeline."""


class ChipNetError(Exception):
    """Base class for every error raised by this package."""


class DomainError(ChipNetError, ValueError):
    """An argument lies outside the domain of the operation."""


class ShapeError(ChipNetError, ValueError):
    pass


class ConfigurationError(ChipNetError, ValueError):
    pass


class StateError(ChipNetError, RuntimeError):
    pass


class MalformedFrameError(ChipNetError, ValueError):
    pass


class EmptyFrameError(MalformedFrameError):
    pass


class ParseError(MalformedFrameError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UndefinedAngleError(DomainError):
    pass


class ProjectionError(DomainError):
    """Point cannot be projected into the camera (behind it or on the image plane)."""


class ContainerError(ChipNetError, ValueError):
    """Malformed CTEN/CNW1 binary container."""
