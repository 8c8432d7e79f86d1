"""Exception hierarchy shared across the package."""


class BottleGANError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BottleGANError, ValueError):
    """Raised when an array or argument violates an operation's contract."""


class InsufficientTissueError(InvalidInputError):
    """Too few pixels above the optical-density threshold to estimate stains."""


class DegenerateInputError(InvalidInputError):
    """The optical-density cloud does not span a plane."""


class StyleLookupError(BottleGANError, KeyError):
    """A style id is not registered in a style bank."""


class ConfigError(BottleGANError, ValueError):
    pass


class CheckpointError(BottleGANError):
    pass


class ProtocolError(BottleGANError):
    """Violation of the federated message or aggregation contract."""


class TrainingDivergedError(BottleGANError, FloatingPointError):
    """A loss became non-finite during training."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")
