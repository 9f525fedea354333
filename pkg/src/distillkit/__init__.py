"""Knowledge distillation of lightweight image classifiers from one or more teachers."""

from .errors import (
    ConfigurationError,
    DistillKitError,
    IngestionError,
    InputError,
    ResourceError,
    TrainingDiverged,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DistillKitError",
    "IngestionError",
    "InputError",
    "ResourceError",
    "TrainingDiverged",
    "__version__",
]
