"""Ratio matching with gradient-guided importance sampling for binary energy-based models."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .energy import IsingEnergy, LinearEnergy, MlpEnergy  # noqa: E402
from .objectives import EstimatorKind, EstimatorSpec, batch_loss  # noqa: E402
from .trainer import TrainConfig, train  # noqa: E402

__all__ = ["IsingEnergy", "LinearEnergy", "MlpEnergy", "EstimatorKind", "EstimatorSpec", "batch_loss",
           "TrainConfig", "train", "__version__"]
