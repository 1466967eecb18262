"""Reference predictors and weight-averaging baselines.

A predictor is any callable mapping a list of texts to an ``n x K`` array of
class probabilities.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional, Sequence

import numpy as np

from .mixing import EntropyCalibration, MixDiagnostics, predict_adpmixup
from .model import DEFAULT_MAX_LEN, AdapterDelta, BackboneParams, ConfigurationError, predict_proba, tokenize
from .training import LabeledDataset

Predictor = Callable[[Sequence[str]], np.ndarray]

# A full fine-tuned model is stored in the backbone container; its version
# string carries the tag.
FullModelParams = BackboneParams


def model_soup(theta1: FullModelParams, theta2: FullModelParams, alpha: float) -> FullModelParams:
    """Elementwise ``alpha * theta1 + (1 - alpha) * theta2`` over every weight."""
    if [a.shape for a in theta1.arrays()] != [a.shape for a in theta2.arrays()]:
        raise ConfigurationError("models have mismatched dimensions")
    arrays = [alpha * a + (1.0 - alpha) * b for a, b in zip(theta1.arrays(), theta2.arrays())]
    return theta1.replace_arrays(arrays, version=f"soup:{alpha:g}")


def adapter_soup(deltas: Sequence[AdapterDelta]) -> AdapterDelta:
    """Uniform mean of adapters."""
    if not deltas:
        raise ValueError("adapter_soup needs at least one adapter")
    if len({d.shapes() for d in deltas}) != 1:
        raise ConfigurationError("adapters have mismatched dimensions")
    n = len(deltas)
    arrays = []
    for parts in zip(*(d.arrays() for d in deltas)):
        acc = parts[0]
        for a in parts[1:]:
            acc = acc + a
        arrays.append(acc / n)
    return deltas[0].replace_arrays(arrays, tag="soup")


@dataclasses.dataclass(frozen=True)
class AdapterPredictor:
    """Backbone plus a single adapter (or none, for a full model)."""

    backbone: BackboneParams
    adapter: Optional[AdapterDelta] = None
    max_len: int = DEFAULT_MAX_LEN

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        V = self.backbone.vocab_size
        return predict_proba(self.backbone, self.adapter, [tokenize(t, V, self.max_len) for t in texts])


@dataclasses.dataclass(frozen=True)
class AdpMixupPredictor:
    backbone: BackboneParams
    clean: AdapterDelta
    advs: tuple
    calib_clean: EntropyCalibration
    calibs_adv: tuple
    threshold: Optional[float] = None
    forced_beta: Optional[float] = None
    max_len: int = DEFAULT_MAX_LEN

    def predict_with_diagnostics(self, texts: Sequence[str]) -> tuple[np.ndarray, list[MixDiagnostics]]:
        V = self.backbone.vocab_size
        probs, diags = [], []
        for t in texts:
            p, d = predict_adpmixup(self.backbone, self.clean, self.advs, self.calib_clean, self.calibs_adv,
                                    tokenize(t, V, self.max_len), self.threshold, self.forced_beta)
            probs.append(p)
            diags.append(d)
        return np.array(probs).reshape(len(texts), self.backbone.num_classes), diags

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        return self.predict_with_diagnostics(texts)[0]


def predictions(predictor: Predictor, texts: Sequence[str]) -> np.ndarray:
    """Argmax labels; np.argmax resolves ties toward the lowest class index."""
    return np.argmax(predictor(texts), axis=1)


def evaluate(predictor: Predictor, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predictions(predictor, dataset.texts) == dataset.labels))
