"""Exception types shared across the package."""


class LesionmapError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(LesionmapError, ValueError):
    """Shapes of the operands do not compose."""


class UnsupportedFormatError(LesionmapError, ValueError):
    """File is not in a format this package reads or writes."""


class TruncatedFileError(LesionmapError, ValueError):
    """File ended before all declared payload bytes were present."""


class WeightsFormatError(LesionmapError, ValueError):
    """Weight file has a bad magic string or malformed framing."""


class ParameterMismatchError(LesionmapError, ValueError):
    """Weight file disagrees with the model configuration (name or shape)."""


class DatasetError(LesionmapError, ValueError):
    """Labels CSV or image directory violates the dataset contract."""


class DegenerateClassError(LesionmapError, ValueError):
    """AUC requested for a class with no positives or no negatives."""


class BuildError(LesionmapError, ValueError):
    """Model layers do not compose into a valid network."""
