"""Exception types shared across the package."""


class PortraitAnimError(Exception):
    """Base class for all package errors."""


class ShapeError(PortraitAnimError, ValueError):
    pass


class ConfigError(PortraitAnimError, ValueError):
    pass


class DegenerateGeometryError(PortraitAnimError, ValueError):
    """Point sets too degenerate to define a unique rotation."""


class FaceNotFoundError(PortraitAnimError, LookupError):
    pass


class SamplingError(PortraitAnimError, RuntimeError):
    pass


class TrainingDivergedError(PortraitAnimError, RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UndefinedSimilarityError(PortraitAnimError, ValueError):
    pass


class CheckpointError(PortraitAnimError, RuntimeError):
    pass
