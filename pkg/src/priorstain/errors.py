"""Exception types shared across the package."""


class RangeViolationError(ValueError):
    """Raster values fall outside their declared value range."""


class ParameterError(ValueError):
    """An argument is outside its admissible domain (kernel size, threshold, ...)."""


class ShapeMismatchError(ValueError):
    """Two rasters that must be aligned have different shapes."""


class ConfigurationError(ValueError):
    """Model or experiment configuration is inconsistent."""


class DataError(RuntimeError):
    """Dataset is missing, empty or malformed."""


class BackendError(RuntimeError):
    """A segmentation or feature backend failed."""


class NumericalError(ArithmeticError):
    """A loss or sample became non-finite."""


class UndefinedFractionError(ValueError):
    """Positive fraction requested for an image with zero nuclei."""


class ProtocolError(RuntimeError):
    """Evaluation protocol violated, e.g. testing before the threshold is frozen."""
