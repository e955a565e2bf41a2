"""Flow-matching transformers with long residual connections and a
cross-block representation diversity loss, plus CKA analysis tools."""

from .config import DiversityConfig, ModelConfig, RunConfig, SampleConfig, TrainConfig, DatasetSpec
from .tensor import Rng, Tensor

__version__ = "0.1.0"

__all__ = ["DatasetSpec", "DiversityConfig", "ModelConfig", "RunConfig", "SampleConfig",
           "TrainConfig", "Rng", "Tensor"]
