"""Text-oriented cross-attention network for multimodal sentiment regression."""

from .config import ModelConfig, TrainConfig
from .data import Dataset, Sample, SyntheticConfig, generate_synthetic, load_dataset, write_dataset
from .metrics import MetricsReport, evaluate_predictions
from .model import TCAN
from .training import fit, train

__version__ = "0.1.0"

__all__ = [
    "TCAN", "ModelConfig", "TrainConfig", "Dataset", "Sample", "SyntheticConfig",
    "generate_synthetic", "load_dataset", "write_dataset", "MetricsReport",
    "evaluate_predictions", "fit", "train", "__version__",
]
