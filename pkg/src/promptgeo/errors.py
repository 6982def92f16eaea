"""Exception hierarchy shared by every module."""


class PromptGeoError(Exception):
    """Base class for all package errors."""


class ShapeError(PromptGeoError, ValueError):
    """Array dimensions do not agree."""


class UnsupportedFormatError(PromptGeoError):
    """Raster or vector file is readable but not supported."""


class SchemaError(PromptGeoError, ValueError):
    """Vector geometries do not match the requested prompt mode."""


class EmptyPromptError(PromptGeoError, ValueError):
    """No usable prompt could be built."""


class PreconditionError(PromptGeoError, ValueError):
    pass


class BackendError(PromptGeoError, RuntimeError):
    """Inference backend is unavailable or failed."""


class ExemplarNotFoundError(PromptGeoError):
    """No detection survived the thresholds, so no exemplar could be chosen."""


class ResolutionError(PromptGeoError):
    """Exemplar mask covers no feature-map cell."""


class ExhaustedError(PromptGeoError):
    """Every feature-map cell is excluded."""


class NumericError(PromptGeoError, ArithmeticError):
    pass


class DivergedError(NumericError):
    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")


class EmptyClassError(PromptGeoError, ValueError):
    """Requested class id does not occur in the label raster."""


class ManifestError(PromptGeoError, ValueError):
    """Manifest validation failure; ``field`` names the offending key path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
