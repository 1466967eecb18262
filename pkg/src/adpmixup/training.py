"""SGD training for the backbone, full fine-tunes and adapters.

All routines use plain constant-rate SGD on the batch-mean cross-entropy.
Batch order is a fresh ``rng.permutation`` per epoch drawn from
``np.random.default_rng(cfg.seed)`` after parameter initialization, so a
(seed, data, config) triple fixes the result bit for bit.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import os
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .model import (
    DEFAULT_CLASSES,
    DEFAULT_DIM,
    DEFAULT_EMBED_SCALE,
    DEFAULT_MAX_LEN,
    DEFAULT_RANK,
    DEFAULT_VOCAB,
    AdapterDelta,
    BackboneParams,
    NumericError,
    adapter_loss_and_grad,
    backbone_loss_and_grad,
    check_compatible,
    tokenize,
)


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    alpha: float = 0.5  # clean-loss weight, only read by train_augmented

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclasses.dataclass
class LabeledDataset:
    items: list  # of (text, label)
    name: str = ""

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def texts(self) -> list[str]:
        return [t for t, _ in self.items]

    @property
    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self.items], dtype=np.int64)

    def tokens(self, vocab_size: int, max_len: int = DEFAULT_MAX_LEN) -> list[list[int]]:
        return [tokenize(t, vocab_size, max_len) for t, _ in self.items]

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "LabeledDataset":
        return LabeledDataset([self.items[i] for i in indices], self.name if name is None else name)


def read_jsonl(path: Union[str, os.PathLike], num_classes: int = DEFAULT_CLASSES,
               name: Optional[str] = None) -> LabeledDataset:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            text, label = obj["text"], obj["label"]
            if not isinstance(text, str) or not isinstance(label, int) or isinstance(label, bool):
                raise ValueError(f"{path}:{lineno}: expected string text and integer label")
            if not 0 <= label < num_classes:
                raise ValueError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
            items.append((text, label))
    return LabeledDataset(items, name or os.path.splitext(os.path.basename(str(path)))[0])


def write_jsonl(dataset: LabeledDataset, path: Union[str, os.PathLike]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for text, label in dataset.items:
            fh.write(json.dumps({"text": text, "label": int(label)}, ensure_ascii=False) + "\n")


def _require_nonempty(dataset: LabeledDataset) -> None:
    if len(dataset) == 0:
        raise ValueError(f"dataset '{dataset.name}' is empty")


def _batch_stream(rng: np.random.Generator, n: int, batch_size: int) -> Iterator[np.ndarray]:
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start: start + batch_size]


def _sgd_step(arrays, grads, lr):
    return [p - lr * g for p, g in zip(arrays, grads)]


def _finite_or_raise(loss, epoch, batch):
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss", epoch, batch)


# -- full-weight training ------------------------------------------------


def train_full(init: BackboneParams, dataset: LabeledDataset, cfg: TrainConfig,
               max_len: int = DEFAULT_MAX_LEN, version: Optional[str] = None,
               history: Optional[list] = None) -> BackboneParams:
    """Train every backbone weight with SGD, starting from ``init``."""
    _require_nonempty(dataset)
    rng = np.random.default_rng(cfg.seed)
    toks = dataset.tokens(init.vocab_size, max_len)
    labels = dataset.labels
    params = init
    stream = _batch_stream(rng, len(dataset), cfg.batch_size)
    steps = math.ceil(len(dataset) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        losses = []
        for b in range(steps):
            idx = next(stream)
            try:
                loss, grads = backbone_loss_and_grad(params, [toks[i] for i in idx], labels[idx])
            except NumericError as exc:
                raise TrainingError(str(exc), epoch, b) from exc
            _finite_or_raise(loss, epoch, b)
            losses.append(loss)
            params = params.replace_arrays(
                _sgd_step(params.arrays(), [grads[n] for n in BackboneParams.ARRAYS], cfg.learning_rate))
        if history is not None:
            history.append(float(np.mean(losses)))
    return params if version is None else params.replace_arrays(params.arrays(), version=version)


def pretrain_backbone(dataset: LabeledDataset, cfg: TrainConfig, vocab_size: int = DEFAULT_VOCAB,
                      dim: int = DEFAULT_DIM, num_classes: int = DEFAULT_CLASSES,
                      max_len: int = DEFAULT_MAX_LEN, history: Optional[list] = None,
                      embed_scale: float = DEFAULT_EMBED_SCALE) -> BackboneParams:
    _require_nonempty(dataset)
    if dataset.labels.max() >= num_classes:
        raise ValueError("dataset labels exceed num_classes")
    init = BackboneParams.random(np.random.default_rng([cfg.seed, 1]), vocab_size, dim, num_classes,
                                 embed_scale=embed_scale)
    return train_full(init, dataset, cfg, max_len=max_len, history=history)


# -- adapter training ----------------------------------------------------


def train_adapter(backbone: BackboneParams, dataset: LabeledDataset, cfg: TrainConfig,
                  rank: int = DEFAULT_RANK, max_len: int = DEFAULT_MAX_LEN, tag: str = "clean",
                  history: Optional[list] = None) -> AdapterDelta:
    """Fit a fresh adapter on ``dataset``; the backbone is only read."""
    _require_nonempty(dataset)
    rng = np.random.default_rng(cfg.seed)
    adapter = AdapterDelta.init_small(rng, backbone.dim, rank, backbone.num_classes, tag=tag)
    toks = dataset.tokens(backbone.vocab_size, max_len)
    labels = dataset.labels
    stream = _batch_stream(rng, len(dataset), cfg.batch_size)
    steps = math.ceil(len(dataset) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        losses = []
        for b in range(steps):
            idx = next(stream)
            try:
                loss, grads = adapter_loss_and_grad(backbone, adapter, [toks[i] for i in idx], labels[idx])
            except NumericError as exc:
                raise TrainingError(str(exc), epoch, b) from exc
            _finite_or_raise(loss, epoch, b)
            losses.append(loss)
            adapter = adapter.replace_arrays(_sgd_step(adapter.arrays(), grads.arrays(), cfg.learning_rate))
        if history is not None:
            history.append(float(np.mean(losses)))
    return adapter


def train_augmented(backbone: BackboneParams, clean: LabeledDataset, adv: LabeledDataset,
                    cfg: TrainConfig, rank: int = DEFAULT_RANK, max_len: int = DEFAULT_MAX_LEN,
                    tag: str = "advtrain", history: Optional[list] = None) -> AdapterDelta:
    """Minimize ``alpha * CE(clean batch) + (1 - alpha) * CE(adv batch)`` over adapter weights.

    Each data stream draws its epoch permutations from its own copy of the
    post-initialization generator, so ``alpha=1`` (resp. 0) walks exactly the
    batches :func:`train_adapter` would on the clean (resp. adversarial) set.
    An epoch is long enough to cover every stream that carries nonzero weight.
    """
    _require_nonempty(clean)
    _require_nonempty(adv)
    a = cfg.alpha
    rng = np.random.default_rng(cfg.seed)
    adapter = AdapterDelta.init_small(rng, backbone.dim, rank, backbone.num_classes, tag=tag)
    check_compatible(backbone, adapter)

    streams = []
    for ds in (clean, adv):
        streams.append((ds.tokens(backbone.vocab_size, max_len), ds.labels,
                        _batch_stream(copy.deepcopy(rng), len(ds), cfg.batch_size)))
    weights = (a, 1.0 - a)
    steps = max(math.ceil(len(ds) / cfg.batch_size) for ds, w in zip((clean, adv), weights) if w > 0)

    for epoch in range(cfg.epochs):
        losses = []
        for b in range(steps):
            parts = []
            for toks, labels, stream in streams:
                idx = next(stream)
                try:
                    parts.append(adapter_loss_and_grad(backbone, adapter, [toks[i] for i in idx], labels[idx]))
                except NumericError as exc:
                    raise TrainingError(str(exc), epoch, b) from exc
            (lc, gc), (la, ga) = parts
            loss = a * lc + (1.0 - a) * la
            _finite_or_raise(loss, epoch, b)
            losses.append(loss)
            grads = [a * x + (1.0 - a) * y for x, y in zip(gc.arrays(), ga.arrays())]
            adapter = adapter.replace_arrays(_sgd_step(adapter.arrays(), grads, cfg.learning_rate))
        if history is not None:
            history.append(float(np.mean(losses)))
    return adapter
