"""Exception hierarchy shared by all tvmerge modules."""


class TVMergeError(Exception):
    """Base class for every error raised by tvmerge."""


class StructureError(TVMergeError, ValueError):
    """Shapes, block names or configs do not line up."""


class DomainError(TVMergeError, ValueError):
    """A scalar argument lies outside its admissible range."""


class NumericalError(TVMergeError, ArithmeticError):
    """Non-finite values or an iterative routine failed to converge."""


class UndefinedMetricError(TVMergeError, ValueError):
    """The requested metric has no value for the given inputs."""


class ConfigError(TVMergeError, ValueError):
    """An experiment config could not be parsed or validated."""
