"""Exception types shared across the package."""


class ViewdiffError(Exception):
    """Base class for all package errors."""


class ConfigError(ViewdiffError):
    """A configuration value is invalid; message names the field."""


class DomainError(ViewdiffError):
    """An argument is outside the documented domain of an operation."""


class ShapeError(ViewdiffError):
    """Tensor shapes are incompatible; message names the op."""


class ValidationError(ViewdiffError):
    """A record violates a structural invariant."""


class ParseError(ViewdiffError):
    """A persisted file cannot be parsed; message carries the line number."""


class TrainingDiverged(ViewdiffError):
    """A training loss became non-finite."""


class MetricUndefined(ViewdiffError):
    """A metric has no defined value on the given inputs."""


class ComparisonError(ViewdiffError):
    """Run artifacts asked to be compared are incompatible."""
