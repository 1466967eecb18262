"""Entropy-routed mixing of clean and adversarial adapters over a frozen backbone."""

from .model import AdapterDelta, BackboneParams, forward, predict_proba, tokenize
from .training import LabeledDataset, TrainConfig, pretrain_backbone, train_adapter, train_augmented
from .mixing import (
    EntropyCalibration,
    MixDiagnostics,
    alpha_adv,
    alpha_clean,
    calibrate,
    detect_adversarial,
    entropy,
    mix_multi,
    mix_pair,
    predict_adpmixup,
)
from .baselines import adapter_soup, evaluate, model_soup

__version__ = "0.1.0"
