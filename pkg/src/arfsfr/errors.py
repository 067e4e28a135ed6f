"""Exception types shared across the package."""


class ArfError(Exception):
    """Base class for all package errors."""


class DimensionError(ArfError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigurationError(ArfError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractViolation(ArfError, ValueError):
    """An input lies outside the domain an operation is defined on."""


class EpisodeError(ArfError, ValueError):
    """An episode cannot be drawn from the given dataset."""


class GradCheckError(ArfError, RuntimeError):
    """A finite-difference check could not be carried out."""


class FormatError(ArfError, ValueError):
    """A file does not conform to its byte layout."""


class TrainingError(ArfError, RuntimeError):
    """Training diverged or hit an unrecoverable state."""
