"""Exception hierarchy shared by every stage of the toolkit."""


class FluxLatticeError(Exception):
    """Base class for all errors raised by fluxlattice."""


class ValidationError(FluxLatticeError, ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(ValidationError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ValidationError):
    """Invalid configuration value."""


class DegenerateVarianceError(ValidationError):
    """A normalization was asked to divide by a zero spread."""


class InsufficientDataError(ValidationError):
    pass


class UndefinedIndexError(ValidationError):
    """A clustering index is undefined for the given partitions."""


class IntegrityError(FluxLatticeError):
    """Duplicate keys, truncated or corrupted files."""


class VersionError(FluxLatticeError):
    """Model file written by an unsupported format version."""


class ConditioningError(FluxLatticeError):
    """Covariance matrix could not be factorized, even with jitter."""


class TrainingError(FluxLatticeError):
    pass


class RoutingError(FluxLatticeError):
    """A held-out profile could not be assigned to a cluster."""


class StageDependencyError(FluxLatticeError):
    """An upstream pipeline artifact is missing."""

    def __init__(self, missing):
        self.missing = str(missing)
        super().__init__(f"missing upstream artifact: {self.missing}")
