"""Exception hierarchy shared across distillkit."""


class DistillKitError(Exception):
    """Base class for all distillkit errors."""


class ConfigurationError(DistillKitError, ValueError):
    """Invalid configuration, architecture spec or argument combination.

    ``key`` optionally names the offending config path (``train.epochs``).
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class InputError(DistillKitError, ValueError):
    """Malformed tensor, array or image input."""


class ResourceError(DistillKitError, FileNotFoundError):
    """A required file (weights, checkpoint, sidecar) is missing."""


class IngestionError(DistillKitError):
    """A dataset root could not be turned into a manifest."""


class TrainingDiverged(DistillKitError, RuntimeError):
    """Raised when a loss becomes NaN or infinite during training."""
