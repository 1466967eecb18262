"""Entropy-calibrated, per-sample mixing of clean and adversarial adapters.

For a test input the clean adapter's prediction entropy is normalized
against its calibration range (low entropy -> clean-like, alpha_clean near 1);
each adversarial adapter's entropy is normalized the other way round, so a
confident adversarial prediction pulls its coefficient toward 0.  The two are
averaged into a per-attack beta and the adapters are merged as::

    delta = (sum_l beta_l / m) * clean + sum_l ((1 - beta_l) / m) * adv_l
"""

from __future__ import annotations

import csv
import dataclasses
import io
from typing import Optional, Sequence

import numpy as np

from .model import AdapterDelta, BackboneParams, ConfigurationError, forward, predict_proba, tokenize
from .training import LabeledDataset

CLEAN = "clean"
ADV = "adv"


class CalibrationError(ValueError):
    pass


def entropy(p) -> float:
    """Shannon entropy in nats, with 0 log 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz))) + 0.0


def entropies(probs: np.ndarray) -> np.ndarray:
    """Row-wise entropy of an ``n x K`` probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=1) + 0.0


@dataclasses.dataclass(frozen=True)
class EntropyCalibration:
    min_h: float
    max_h: float
    mode: str
    n_samples: int = 100

    def __post_init__(self):
        if self.mode not in (CLEAN, ADV):
            raise ValueError(f"mode must be '{CLEAN}' or '{ADV}'")
        if not 0.0 <= self.min_h <= self.max_h:
            raise CalibrationError(f"need 0 <= min_h <= max_h, got {self.min_h}, {self.max_h}")
        if self.n_samples < 2:
            raise CalibrationError("calibration needs at least 2 samples")


def calibration_from_entropies(hs: Sequence[float], mode: str) -> EntropyCalibration:
    hs = np.asarray(hs, dtype=np.float64)
    if hs.size < 2:
        raise CalibrationError(f"calibration needs at least 2 samples, got {hs.size}")
    return EntropyCalibration(float(hs.min()), float(hs.max()), mode, int(hs.size))


def calibrate(backbone: BackboneParams, adapter: AdapterDelta, samples: LabeledDataset, mode: str,
              n_samples: int = 100, max_len: int = 64) -> EntropyCalibration:
    """Entropy extrema of ``adapter`` over the first ``n_samples`` of ``samples``.

    Callers pass (a shuffled view of) the adapter's own training set.
    """
    items = samples.items[:n_samples]
    if len(items) < 2:
        raise CalibrationError(f"calibration needs at least 2 samples, got {len(items)}")
    toks = [tokenize(t, backbone.vocab_size, max_len) for t, _ in items]
    return calibration_from_entropies(entropies(predict_proba(backbone, adapter, toks)), mode)


def _normalize(num: float, calib: EntropyCalibration) -> float:
    span = calib.max_h - calib.min_h
    if span <= 0.0:
        return 0.5
    return float(min(1.0, max(0.0, num / span)))


def alpha_clean(calib: EntropyCalibration, h: float) -> float:
    """Max-normalized clean coefficient, clamped to [0, 1]."""
    if calib.mode != CLEAN:
        raise ValueError("alpha_clean needs a clean-mode calibration")
    return _normalize(calib.max_h - h, calib)


def alpha_adv(calib: EntropyCalibration, h: float) -> float:
    """Min-normalized adversarial-side coefficient, clamped to [0, 1].

    Low entropy under the adversarial adapter gives a small value, i.e. a
    heavy weight on that adapter.
    """
    if calib.mode != ADV:
        raise ValueError("alpha_adv needs an adversarial-mode calibration")
    return _normalize(h - calib.min_h, calib)


def detect_adversarial(alpha_clean_value: float, threshold: float) -> bool:
    return alpha_clean_value < threshold


# -- merging -------------------------------------------------------------


def _check_same_shape(deltas: Sequence[AdapterDelta]) -> None:
    shapes = {d.shapes() for d in deltas}
    if len(shapes) != 1:
        raise ConfigurationError("adapters have mismatched dimensions")


def linear_combination(deltas: Sequence[AdapterDelta], coeffs: Sequence[float], tag: str = "mix") -> AdapterDelta:
    _check_same_shape(deltas)
    arrays = []
    for parts in zip(*(d.arrays() for d in deltas)):
        acc = coeffs[0] * parts[0]
        for c, a in zip(coeffs[1:], parts[1:]):
            acc = acc + c * a
        arrays.append(acc)
    return deltas[0].replace_arrays(arrays, tag=tag)


def mix_pair(delta_clean: AdapterDelta, delta_adv: AdapterDelta, beta: float) -> AdapterDelta:
    return linear_combination([delta_clean, delta_adv], [beta, 1.0 - beta], tag=f"mix:{beta:g}")


def mix_multi(delta_clean: AdapterDelta, deltas_adv: Sequence[AdapterDelta],
              betas: Sequence[float]) -> AdapterDelta:
    """Mean of the m pairwise mixes, computed in closed form."""
    m = len(deltas_adv)
    if m == 0 or len(betas) != m:
        raise ValueError("need one beta per adversarial adapter and at least one adapter")
    if m == 1:
        return mix_pair(delta_clean, deltas_adv[0], betas[0])
    coeffs = [sum(betas) / m] + [(1.0 - b) / m for b in betas]
    return linear_combination([delta_clean, *deltas_adv], coeffs, tag=f"mix{m}")


# -- inference -----------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class MixDiagnostics:
    alpha_clean: float
    alpha_adv: tuple = ()
    beta: tuple = ()
    early_exit: bool = False
    flagged_adversarial: bool = False
    adapter_passes: int = 0
    mixed: Optional[AdapterDelta] = dataclasses.field(default=None, repr=False)


def predict_adpmixup(backbone: BackboneParams, delta_clean: AdapterDelta, deltas_adv: Sequence[AdapterDelta],
                     calib_clean: EntropyCalibration, calibs_adv: Sequence[EntropyCalibration],
                     x: Sequence[int], threshold: Optional[float] = None,
                     forced_beta: Optional[float] = None) -> tuple[np.ndarray, MixDiagnostics]:
    """Per-sample mixed prediction for token sequence ``x``.

    With ``threshold`` set, inputs whose alpha_clean reaches it exit early with
    the clean adapter's prediction.  ``forced_beta`` bypasses the entropy
    rule (every beta_l fixed) and is used for the fixed-coefficient baselines.
    """
    if len(deltas_adv) != len(calibs_adv) or not deltas_adv:
        raise ValueError("need one calibration per adversarial adapter")
    p_clean = forward(backbone, delta_clean, x)
    a_c = alpha_clean(calib_clean, entropy(p_clean))
    passes = 1
    if threshold is not None and not detect_adversarial(a_c, threshold):
        return p_clean, MixDiagnostics(a_c, early_exit=True, adapter_passes=passes, mixed=delta_clean)

    a_adv = []
    for delta, calib in zip(deltas_adv, calibs_adv):
        a_adv.append(alpha_adv(calib, entropy(forward(backbone, delta, x))))
        passes += 1
    if forced_beta is None:
        betas = tuple((a_c + a) / 2.0 for a in a_adv)
    else:
        betas = (float(forced_beta),) * len(deltas_adv)
    mixed = mix_multi(delta_clean, deltas_adv, betas)
    probs = forward(backbone, mixed, x)
    diag = MixDiagnostics(a_c, tuple(a_adv), betas, early_exit=False,
                          flagged_adversarial=threshold is not None, adapter_passes=passes + 1, mixed=mixed)
    return probs, diag


def diagnostics_csv(rows: Sequence[tuple[int, MixDiagnostics, int, int]], m: int) -> str:
    """One CSV row per sample: id, alpha_clean, per-attack alpha_adv/beta, flags, labels.

    Early-exited samples leave the per-attack columns empty.
    """
    header = ["sample_id", "alpha_clean"]
    for l in range(m):
        header += [f"alpha_adv_{l}", f"beta_{l}"]
    header += ["early_exit", "flagged", "predicted_label", "true_label"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for sample_id, d, pred, true in rows:
        row = [sample_id, repr(d.alpha_clean)]
        for l in range(m):
            if d.early_exit:
                row += ["", ""]
            else:
                row += [repr(d.alpha_adv[l]), repr(d.beta[l])]
        row += [int(d.early_exit), int(d.flagged_adversarial), pred, true]
        w.writerow(row)
    return buf.getvalue()
