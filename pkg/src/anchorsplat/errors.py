"""Exception types raised by the engine."""


class SplatError(Exception):
    """Base class for all engine errors."""


class InvalidParameterError(SplatError, ValueError):
    """A raw parameter is non-finite or otherwise unusable."""


class ConfigurationError(SplatError, ValueError):
    pass


class RenderError(SplatError, FloatingPointError):
    """Non-finite value encountered while rendering."""


class GradientError(SplatError, FloatingPointError):
    pass


class DatasetError(SplatError, ValueError):
    """Missing or malformed dataset content."""


class DivergenceError(SplatError, RuntimeError):
    pass
