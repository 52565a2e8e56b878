"""
Exception hierarchy for the segmentation pipeline.
"""


class CovidSegError(Exception):
    """Base class for every error raised by this package."""


class NotFound(CovidSegError, FileNotFoundError):
    """A required file or directory does not exist."""


class CorruptBundle(CovidSegError):
    """A bundle's manifest or channel files are inconsistent."""


class InvalidMask(CovidSegError):
    """A mask channel holds a value other than 0 or 1."""


class IoError(CovidSegError, OSError):
    """Reading or writing an artifact failed at the operating-system level."""


class InfeasibleSpec(CovidSegError):
    """A phantom specification cannot be realized."""


class InvalidArgument(CovidSegError, ValueError):
    """An argument is outside its accepted domain."""


class InfeasibleSplit(CovidSegError):
    """Not enough samples of a class to build the requested split."""


class InvalidConfig(CovidSegError, ValueError):
    """A network configuration is not buildable."""


class ShapeError(CovidSegError, ValueError):
    """Array shapes do not agree."""


class IncompatibleWeights(CovidSegError):
    """Stored weights do not fit the requested configuration."""


class CorruptWeights(CovidSegError):
    """A weight file cannot be decoded."""
