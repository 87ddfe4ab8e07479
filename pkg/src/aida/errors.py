"""Exception hierarchy shared by every aida module."""


class AidaError(Exception):
    """Base class for all library errors."""


class ShapeError(AidaError, ValueError):
    """Operand shapes do not conform."""


class DomainError(AidaError, ValueError):
    """A value lies outside the domain of a function (log of a negative, NaN loss, ...)."""


class ContractError(AidaError, ValueError):
    """A documented precondition was violated."""


class DegenerateEmbeddingError(ContractError):
    pass


class SamplingError(AidaError, ValueError):
    pass


class ClusteringError(AidaError, RuntimeError):
    pass


class TrainingError(AidaError, RuntimeError):
    """Training diverged; carries the failing stage and step."""

    def __init__(self, message, stage=None, step=None):
        super().__init__(message)
        self.stage = stage
        self.step = step


class ConfigError(AidaError, ValueError):
    pass


class ProtocolError(AidaError, ValueError):
    pass


class FormatError(AidaError, ValueError):
    """A serialized file has the wrong magic, version or layout."""
