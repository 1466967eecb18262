"""End-to-end experiment: pretrain, adapt, attack, calibrate, evaluate six methods.

Each seed is built by :func:`build_seed`, which runs the stages in order and
names the failing stage in a :class:`StageError`.  Artifacts already written
stay on disk when a later stage fails.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import io
import json
import os
from typing import Optional, Sequence

import numpy as np

from .. import checkpoint
from ..attacks import generate_adversarial_dataset, make_oracle
from ..baselines import AdapterPredictor, AdpMixupPredictor, adapter_soup, evaluate, model_soup, predictions
from ..corpus import make_corpus
from ..mixing import ADV, CLEAN, EntropyCalibration, calibrate, diagnostics_csv
from ..model import AdapterDelta, BackboneParams
from ..training import LabeledDataset, pretrain_backbone, read_jsonl, train_adapter, train_augmented, train_full, write_jsonl
from .config import ExperimentConfig

METHODS = ("CleanOnly", "AdvOnly", "AdvTrain", "ModelSoup", "AdapterSoup", "AdpMixup")
RESULTS_HEADER = ("method", "dataset", "clean_acc", "adv_acc", "avg_acc")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # any failure inside a stage aborts the run with its name
        raise StageError(name, exc) from exc


def fmt(x: float) -> str:
    return f"{x:.6f}"


def write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def shuffled(ds: LabeledDataset, seed: int, stream: int) -> LabeledDataset:
    """A seeded permutation of ``ds``; used for calibration subsets and pools."""
    return ds.subset(np.random.default_rng([seed, stream]).permutation(len(ds)))


@dataclasses.dataclass
class SeedRun:
    """Every model and split produced for one seed."""

    seed: int
    train: LabeledDataset
    test: LabeledDataset
    backbone: BackboneParams
    clean: AdapterDelta
    adv_train: dict  # attack kind -> LabeledDataset
    advs: dict  # attack kind -> AdapterDelta
    adv_test: dict  # target kind -> LabeledDataset
    calib_clean: EntropyCalibration
    calibs_adv: dict  # attack kind -> EntropyCalibration
    advtrain: Optional[AdapterDelta] = None
    soup_model: Optional[BackboneParams] = None
    max_len: int = 64

    @property
    def kinds(self) -> tuple:
        return tuple(self.advs)

    def adpmixup(self, threshold=None, forced_beta=None) -> AdpMixupPredictor:
        return AdpMixupPredictor(self.backbone, self.clean, tuple(self.advs.values()), self.calib_clean,
                                 tuple(self.calibs_adv[k] for k in self.kinds), threshold, forced_beta,
                                 self.max_len)

    def predictor(self, method: str, target: Optional[str] = None):
        P = lambda a: AdapterPredictor(self.backbone, a, self.max_len)
        if method == "CleanOnly":
            return P(self.clean)
        if method == "AdvOnly":
            return P(self.advs[target] if target in self.advs else next(iter(self.advs.values())))
        if method == "AdvTrain":
            return P(self.advtrain)
        if method == "ModelSoup":
            return AdapterPredictor(self.soup_model, None, self.max_len)
        if method == "AdapterSoup":
            return P(adapter_soup([self.clean, *self.advs.values()]))
        if method == "AdpMixup":
            return self.adpmixup()
        raise ValueError(f"unknown method {method!r}")


def _data(cfg: ExperimentConfig, seed: int):
    def get(path, n, offset, name):
        if path is not None:
            return read_jsonl(path, cfg.num_classes, name)
        return make_corpus(n, offset + seed, cfg.noise, cfg.clauses, name)

    return (get(cfg.pretrain_path, cfg.n_pretrain, 1000, "pretrain"),
            get(cfg.train_path, cfg.n_train, 2000, "train"),
            get(cfg.test_path, cfg.n_test, 3000, "test"))


_CACHE: dict = {}


def clear_cache() -> None:
    _CACHE.clear()


def build_seed(cfg: ExperimentConfig, seed: int, pre_known: Optional[Sequence[str]] = None,
               targets: Optional[Sequence[str]] = None, baselines: bool = True,
               out_dir: Optional[str] = None) -> SeedRun:
    """Run every training and attack stage for one seed.

    ``pre_known`` and ``targets`` are attack kinds and default to the
    configured ones.  Attack settings for a kind come from the configured
    pre-known entry or target of that kind, else the target's budget and cap.
    With ``out_dir`` set, checkpoints and generated sets are written under
    ``out_dir/<checkpoints>/seed<seed>/``.  Results are memoized per process
    on the full argument set; :func:`clear_cache` forgets them.
    """
    pre_known = tuple(pre_known) if pre_known is not None else tuple(a.kind for a in cfg.pre_known)
    targets = tuple(targets) if targets is not None else (cfg.target.kind,)
    key = (cfg.to_json(), seed, pre_known, targets, baselines, out_dir)
    if key in _CACHE:
        return _CACHE[key]

    ckpt_dir = None if out_dir is None else os.path.join(out_dir, cfg.checkpoint_dir, f"seed{seed}")
    if ckpt_dir is not None:
        os.makedirs(ckpt_dir, exist_ok=True)

    def save(obj, name):
        if ckpt_dir is not None:
            path = os.path.join(ckpt_dir, name)
            write_jsonl(obj, path) if isinstance(obj, LabeledDataset) else checkpoint.save(obj, path)

    by_kind = {a.kind: a for a in (cfg.target, *cfg.pre_known)}
    attack_cfg = lambda k: by_kind.get(k, dataclasses.replace(cfg.target, kind=k))
    tcfg = cfg.train_config(seed)

    with stage("data"):
        pre, train, test = _data(cfg, seed)
        synonyms = cfg.synonyms()
    with stage("pretrain"):
        backbone = pretrain_backbone(pre, cfg.pretrain_config(seed), cfg.vocab_size, cfg.dim, cfg.num_classes,
                                     cfg.max_len, embed_scale=cfg.embed_scale)
        save(backbone, "backbone.ckpt")
    with stage("clean_adapter"):
        clean = train_adapter(backbone, train, tcfg, cfg.rank, cfg.max_len, tag="clean")
        save(clean, "adapter_clean.ckpt")
    victim = make_oracle(backbone, clean, cfg.max_len)

    adv_train, advs = {}, {}
    for kind in pre_known:
        with stage(f"attack_train:{kind}"):
            ds = generate_adversarial_dataset(victim, train, attack_cfg(kind).spec(seed, synonyms))
            if len(ds) < 2:
                raise ValueError(f"only {len(ds)} successful {kind} examples on the training set")
            adv_train[kind] = ds
            save(ds, f"adv_train_{kind}.jsonl")
        with stage(f"adv_adapter:{kind}"):
            advs[kind] = train_adapter(backbone, ds, tcfg, cfg.rank, cfg.max_len, tag=f"adv:{kind}")
            save(advs[kind], f"adapter_adv_{kind}.ckpt")

    adv_test = {}
    for kind in targets:
        with stage(f"attack_test:{kind}"):
            ds = generate_adversarial_dataset(victim, test, attack_cfg(kind).spec(seed, synonyms))
            if len(ds) == 0:
                raise ValueError(f"no successful {kind} examples on the test set")
            adv_test[kind] = ds
            save(ds, f"adv_test_{kind}.jsonl")

    with stage("calibrate"):
        n = cfg.calibration_samples
        calib_clean = calibrate(backbone, clean, shuffled(train, seed, 11), CLEAN, n, cfg.max_len)
        calibs_adv = {k: calibrate(backbone, advs[k], shuffled(adv_train[k], seed, 12), ADV, n, cfg.max_len)
                      for k in pre_known}
        if ckpt_dir is not None:
            calib = {"clean": dataclasses.asdict(calib_clean),
                     "adv": {k: dataclasses.asdict(c) for k, c in calibs_adv.items()}}
            write_text(os.path.join(ckpt_dir, "calibration.json"), json.dumps(calib, indent=2, sort_keys=True) + "\n")

    run = SeedRun(seed, train, test, backbone, clean, adv_train, advs, adv_test, calib_clean, calibs_adv,
                  max_len=cfg.max_len)
    if baselines:
        adv_union = LabeledDataset([it for k in pre_known for it in adv_train[k].items], "adv_union")
        with stage("advtrain"):
            run.advtrain = train_augmented(backbone, train, adv_union, tcfg, cfg.rank, cfg.max_len)
            save(run.advtrain, "adapter_advtrain.ckpt")
        with stage("model_soup"):
            theta1 = train_full(backbone, train, tcfg, cfg.max_len, version="full:clean")
            theta2 = train_full(backbone, adv_union, tcfg, cfg.max_len, version="full:adv")
            run.soup_model = model_soup(theta1, theta2, cfg.model_soup_alpha)
            save(run.soup_model, "model_soup.ckpt")
    _CACHE[key] = run
    return run


def seed_results(run: SeedRun, target: str) -> list[tuple]:
    """(method, clean_acc, adv_acc) for the six methods on one seed's splits."""
    rows = []
    for method in METHODS:
        with stage(f"evaluate:{method}"):
            p = run.predictor(method, target)
            rows.append((method, evaluate(p, run.test), evaluate(p, run.adv_test[target])))
    return rows


def run_pipeline(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> str:
    """Run every seed and return the results table as CSV text.

    The table holds, per method, the median over seeds of clean accuracy,
    adversarial accuracy and their per-seed average.  With ``out_dir`` set
    it is written to ``results.csv`` next to ``results_per_seed.csv`` and a
    per-sample ``diagnostics_seed<N>.csv`` for the AdpMixup run.
    """
    target = cfg.target.kind
    per_seed = {}
    for seed in cfg.seeds:
        run = build_seed(cfg, seed, out_dir=out_dir)
        per_seed[seed] = seed_results(run, target)
        if out_dir is not None:
            mix = run.adpmixup()
            texts = run.adv_test[target].texts
            _, diags = mix.predict_with_diagnostics(texts)
            preds = predictions(mix, texts)
            rows = [(i, d, int(p), int(y)) for i, (d, p, y) in enumerate(zip(diags, preds, run.adv_test[target].labels))]
            write_text(os.path.join(out_dir, f"diagnostics_seed{seed}.csv"), diagnostics_csv(rows, len(run.advs)))

    table = []
    for j, method in enumerate(METHODS):
        clean = [per_seed[s][j][1] for s in cfg.seeds]
        adv = [per_seed[s][j][2] for s in cfg.seeds]
        avg = [(c + a) / 2.0 for c, a in zip(clean, adv)]
        table.append((method, cfg.task, fmt(np.median(clean)), fmt(np.median(adv)), fmt(np.median(avg))))
    text = csv_text(RESULTS_HEADER, table)
    if out_dir is not None:
        rows = [(s, m, cfg.task, fmt(c), fmt(a), fmt((c + a) / 2.0)) for s in cfg.seeds for m, c, a in per_seed[s]]
        write_text(os.path.join(out_dir, "results_per_seed.csv"), csv_text(("seed",) + RESULTS_HEADER, rows))
        write_text(os.path.join(out_dir, "results.csv"), text)
        write_text(os.path.join(out_dir, "config.json"), cfg.to_json())
    return text


def read_results(text: str) -> dict:
    """Parse a results CSV into ``{method: (clean_acc, adv_acc, avg_acc)}``."""
    rows = list(csv.DictReader(io.StringIO(text)))
    return {r["method"]: (float(r["clean_acc"]), float(r["adv_acc"]), float(r["avg_acc"])) for r in rows}
