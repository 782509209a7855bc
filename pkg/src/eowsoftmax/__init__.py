"""K+1-way softmax classifiers with an open-world uncertainty output."""

from .calibration import ece, evaluate, nll, ood_threshold_accuracy, temperature_fit
from .energy import SgldConfig, sample
from .model import EowClassifier, load_checkpoint, save_checkpoint
from .objective import TrainConfig, eow_loss, fit, label_smoothing_loss, vanilla_loss

__version__ = "0.1.0"

__all__ = [
    "EowClassifier",
    "SgldConfig",
    "TrainConfig",
    "ece",
    "eow_loss",
    "evaluate",
    "fit",
    "label_smoothing_loss",
    "load_checkpoint",
    "nll",
    "ood_threshold_accuracy",
    "sample",
    "save_checkpoint",
    "temperature_fit",
    "vanilla_loss",
]
