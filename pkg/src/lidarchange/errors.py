"""Exception types shared across the package."""


class LidarChangeError(Exception):
    """Base class for all package-specific errors."""


class InvalidParameterError(LidarChangeError):
    """A parameter value violates an operation precondition."""


class InvalidInputError(LidarChangeError):
    """Input data is malformed (shape/type/invariant violation)."""


class EmptyInputError(LidarChangeError):
    """An operation requiring non-empty input received an empty one."""


class InsufficientDataError(LidarChangeError):
    """Not enough data points to carry out the operation."""


class PlacementRejectedError(LidarChangeError):
    """Object placement is not close enough to observed ground."""


class CollisionRejectedError(LidarChangeError):
    """Object footprint collides with an already reserved footprint."""


class GenerationFailedError(LidarChangeError):
    """Repeated placement attempts failed; pair generation aborted."""


class TrainingDivergedError(LidarChangeError):
    """Training hit a non-finite loss.

    Attributes:
        epoch: zero-based epoch index at which the divergence occurred.
    """

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class InvalidModelError(LidarChangeError):
    """Model parameters are inconsistent with the requested inference."""


class ConfigError(LidarChangeError):
    """Configuration file could not be parsed.

    Attributes:
        line: one-based line number of the offending entry (0 if unknown).
    """

    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(message)
