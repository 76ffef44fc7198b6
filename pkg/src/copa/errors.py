"""Exception hierarchy shared across the package.

The command line maps these to stable exit codes (see ``copa.cli``).
"""


class CopaError(Exception):
    """Base class for package errors."""


class ConfigurationError(CopaError):
    """Invalid configuration, argument, or precondition."""


class EstimationError(CopaError):
    """A prevalence estimate cannot be formed from the given data."""


class NumericalError(CopaError):
    """A numerical operation failed (singular matrix, empty posterior, ...)."""


class MissingArtifactError(CopaError):
    """A required on-disk artifact (checkpoint, dataset, report) is absent."""
