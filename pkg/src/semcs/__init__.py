"""Text-guided semantic style transfer with spectral salient-object masks."""

from .config import LossWeights, RunConfig, TrainingConfig, resolve_config
from .errors import ConfigurationError, InputError, NumericalError, SemcsError

__version__ = "0.1.0"

__all__ = [
    "LossWeights", "RunConfig", "TrainingConfig", "resolve_config",
    "SemcsError", "InputError", "ConfigurationError", "NumericalError",
]
