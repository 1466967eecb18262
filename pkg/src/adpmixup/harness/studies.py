"""Diagnostic studies on top of the pipeline: fixed-beta sweep, detector
threshold tradeoff and the pre-known x target coefficient heatmap.

Each study returns a summary CSV string (median over the configured seeds)
and, given an output directory, also writes a per-seed CSV next to it.
"""

from __future__ import annotations

import os
from typing import Optional

import numpy as np

from ..mixing import mix_pair
from ..model import cross_entropy, predict_proba, tokenize
from ..training import LabeledDataset
from .config import ExperimentConfig
from .pipeline import build_seed, csv_text, fmt, shuffled, write_text

SWEEP_HEADER = ("clean_ratio", "n_samples", "best_beta", "best_acc", "worst_beta", "worst_acc",
                "dynamic_acc", "soup_acc", "dynamic_gap")
SWEEP_CURVE_HEADER = ("seed", "clean_ratio", "beta", "accuracy", "cross_entropy")
TRADEOFF_HEADER = ("threshold", "accuracy", "fnr", "fpr", "full_mix_fraction")


class StudyError(ValueError):
    pass


def mixed_set(clean: LabeledDataset, adv: LabeledDataset, n_clean: int, n_adv: int, seed: int) -> LabeledDataset:
    """Seeded prefixes of shuffled clean and adversarial sets, clean items first."""
    if n_clean > len(clean) or n_adv > len(adv):
        raise StudyError(f"need {n_clean} clean and {n_adv} adversarial samples, "
                         f"have {len(clean)} and {len(adv)}")
    c = shuffled(clean, seed, 21).items[:n_clean]
    a = shuffled(adv, seed, 22).items[:n_adv]
    return LabeledDataset(c + a, f"mixed:{n_clean}+{n_adv}")


def _median_pick(curves: np.ndarray, losses: np.ndarray, grid, best: bool) -> int:
    """Index of the best (or worst) beta on the seed-median curves.

    Accuracy decides; equal accuracies fall back to the lower median
    cross-entropy (higher for the worst pick), then to the lower beta.
    """
    acc = np.median(curves, axis=0)
    ce = np.median(losses, axis=0)
    sign = 1.0 if best else -1.0
    return min(range(len(grid)), key=lambda j: (-sign * acc[j], sign * ce[j], grid[j]))


def beta_sweep(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> str:
    """Fixed-beta accuracy curves against dynamic AdpMixup over clean ratios.

    Only the first pre-known attack is used (single adversarial adapter);
    it also plays the target.  For each clean ratio the mixed set has as many
    items as the smaller of the two test splits.  ``dynamic_gap`` is the
    median over seeds of dynamic accuracy minus that seed's best fixed-beta
    accuracy.
    """
    kind = cfg.pre_known[0].kind
    grid = cfg.beta_grid
    ratios = cfg.clean_ratios
    acc = np.zeros((len(cfg.seeds), len(ratios), len(grid)))
    ce = np.zeros_like(acc)
    dyn = np.zeros((len(cfg.seeds), len(ratios)))
    sizes = {}
    curve_rows = []
    for si, seed in enumerate(cfg.seeds):
        run = build_seed(cfg, seed, pre_known=(kind,), targets=(kind,), baselines=False)
        clean_set, adv_set = run.test, run.adv_test[kind]
        n = min(len(clean_set), len(adv_set))
        adapter = run.advs[kind]
        mixer = run.adpmixup()
        for ri, r in enumerate(ratios):
            n_clean = int(round(r * n))
            ds = mixed_set(clean_set, adv_set, n_clean, n - n_clean, seed)
            sizes.setdefault(ri, []).append(len(ds))
            toks = ds.tokens(run.backbone.vocab_size, cfg.max_len)
            for bi, beta in enumerate(grid):
                mixed = mix_pair(run.clean, adapter, beta)
                probs = predict_proba(run.backbone, mixed, toks)
                acc[si, ri, bi] = float(np.mean(np.argmax(probs, axis=1) == ds.labels))
                ce[si, ri, bi] = cross_entropy(run.backbone, mixed, toks, ds.labels)
                curve_rows.append((seed, fmt(r), fmt(beta), fmt(acc[si, ri, bi]), fmt(ce[si, ri, bi])))
            preds = np.argmax(mixer([t for t, _ in ds.items]), axis=1)
            dyn[si, ri] = float(np.mean(preds == ds.labels))

    soup_j = int(np.argmin(np.abs(np.asarray(grid) - 0.5)))
    rows = []
    for ri, r in enumerate(ratios):
        b = _median_pick(acc[:, ri], ce[:, ri], grid, best=True)
        w = _median_pick(acc[:, ri], ce[:, ri], grid, best=False)
        gap = float(np.median(dyn[:, ri] - acc[:, ri].max(axis=1)))
        rows.append((fmt(r), int(np.median(sizes[ri])), fmt(grid[b]), fmt(np.median(acc[:, ri, b])),
                     fmt(grid[w]), fmt(np.median(acc[:, ri, w])), fmt(np.median(dyn[:, ri])),
                     fmt(np.median(acc[:, ri, soup_j])), fmt(gap)))
    text = csv_text(SWEEP_HEADER, rows)
    if out_dir is not None:
        write_text(os.path.join(out_dir, "sweep.csv"), text)
        write_text(os.path.join(out_dir, "sweep_curves.csv"), csv_text(SWEEP_CURVE_HEADER, curve_rows))
    return text


def tradeoff_pool(clean: LabeledDataset, adv: LabeledDataset, ratio: float, seed: int) -> tuple[LabeledDataset, np.ndarray]:
    """A pool with an adversarial fraction of ``ratio``, as large as the splits allow.

    Returns the pool and a boolean mask marking its adversarial items.
    """
    n_clean = len(clean)
    n_adv = int(round(ratio / (1.0 - ratio) * n_clean))
    if n_adv > len(adv):
        n_adv = len(adv)
        n_clean = min(len(clean), int(round(n_adv * (1.0 - ratio) / ratio)))
    if n_adv == 0 or n_clean == 0:
        raise StudyError("not enough samples to build the tradeoff pool")
    pool = mixed_set(clean, adv, n_clean, n_adv, seed)
    return pool, np.arange(len(pool)) >= n_clean


def tradeoff_rows(run, pool: LabeledDataset, is_adv: np.ndarray, thresholds) -> list[tuple]:
    """(threshold, accuracy, FNR, FPR, full-mix fraction) for one seed."""
    texts = pool.texts
    out = []
    for t in thresholds:
        probs, diags = run.adpmixup(threshold=t).predict_with_diagnostics(texts)
        flagged = np.array([d.flagged_adversarial for d in diags])
        full = np.array([not d.early_exit for d in diags])
        accuracy = float(np.mean(np.argmax(probs, axis=1) == pool.labels))
        fnr = float(np.mean(~flagged[is_adv]))
        fpr = float(np.mean(flagged[~is_adv]))
        out.append((t, accuracy, fnr, fpr, float(np.mean(full))))
    return out


def threshold_tradeoff(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> str:
    """Accuracy and detector error rates across the threshold grid.

    The pool mixes the clean test split with target-attack examples at the
    configured adversarial ratio.  Values are medians over seeds.
    """
    target = cfg.target.kind
    per_seed = []
    for seed in cfg.seeds:
        run = build_seed(cfg, seed, baselines=False)
        pool, is_adv = tradeoff_pool(run.test, run.adv_test[target], cfg.adversarial_ratio, seed)
        per_seed.append(tradeoff_rows(run, pool, is_adv, cfg.thresholds))
    arr = np.array([[row[1:] for row in rows] for rows in per_seed])
    med = np.median(arr, axis=0)
    rows = [(fmt(t), *(fmt(v) for v in med[i])) for i, t in enumerate(cfg.thresholds)]
    text = csv_text(TRADEOFF_HEADER, rows)
    if out_dir is not None:
        write_text(os.path.join(out_dir, "tradeoff.csv"), text)
        seed_rows = [(s, *(fmt(v) for v in r)) for s, rs in zip(cfg.seeds, per_seed) for r in rs]
        write_text(os.path.join(out_dir, "tradeoff_per_seed.csv"), csv_text(("seed",) + TRADEOFF_HEADER, seed_rows))
    return text


def profile_matrix(run, kinds, n_samples: int) -> np.ndarray:
    """Mean beta per (pre-known row, target column); the last column is clean text."""
    mixer = run.adpmixup()
    cols = [(k, run.adv_test[k]) for k in kinds] + [("clean", run.test)]
    mat = np.zeros((len(kinds), len(cols)))
    for j, (name, ds) in enumerate(cols):
        if len(ds) < n_samples:
            raise StudyError(f"pair (*, {name}) has {len(ds)} samples, {n_samples} required")
        _, diags = mixer.predict_with_diagnostics(ds.texts[:n_samples])
        mat[:, j] = np.mean([d.beta for d in diags], axis=0)
    return mat


def profile_heatmap(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> str:
    """Average beta of every pre-known adapter under every target attack.

    One adversarial adapter per configured profile attack is trained and all
    of them are mixed together.  Rows name the pre-known attack, columns the
    target attack plus a clean column; entries are medians over seeds.
    """
    kinds = tuple(cfg.profile_attacks)
    if len(kinds) < 2:
        raise StudyError("the profile needs at least two attack kinds")
    mats = []
    for seed in cfg.seeds:
        run = build_seed(cfg, seed, pre_known=kinds, targets=kinds, baselines=False)
        mats.append(profile_matrix(run, kinds, cfg.profile_samples))
    med = np.median(np.array(mats), axis=0)
    header = ("pre_known",) + kinds + ("clean",)
    text = csv_text(header, [(k, *(fmt(v) for v in med[i])) for i, k in enumerate(kinds)])
    if out_dir is not None:
        write_text(os.path.join(out_dir, "profile.csv"), text)
        rows = [(s, k, *(fmt(v) for v in m[i])) for s, m in zip(cfg.seeds, mats) for i, k in enumerate(kinds)]
        write_text(os.path.join(out_dir, "profile_per_seed.csv"), csv_text(("seed",) + header, rows))
    return text
