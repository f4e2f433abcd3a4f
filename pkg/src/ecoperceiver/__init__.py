"""Multimodal carbon-flux model on a numpy autodiff core, with the eddy-covariance data pipeline around it."""
from .checkpoint import Checkpoint
from .dataio import CorpusSpec, WindowSet, generate_corpus, make_windows
from .encoding import EncodingConfig, fourier_encode
from .metrics import fit_linear_baseline, nse, paired_t_test, rmse
from .model import EcoPerceiver, ModelConfig, parameter_count
from .pipeline import NormalizationManifest, SplitPlan, stratified_split
from .trainer import TrainConfig, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CorpusSpec", "EcoPerceiver", "EncodingConfig", "ModelConfig", "NormalizationManifest",
    "SplitPlan", "TrainConfig", "WindowSet", "fit_linear_baseline", "fourier_encode", "generate_corpus",
    "lr_schedule", "make_windows", "nse", "paired_t_test", "parameter_count", "rmse", "stratified_split",
    "train",
]
