"""Tiny hashed-bag-of-words classifier with two bottleneck adapter slots.

Architecture (all float64)::

    pooled = mean(embedding[ids])
    h1 = relu(pooled @ w1 + b1);   a1 = h1 + adapter_1(h1)
    h2 = relu(a1 @ w2 + b2);       a2 = h2 + adapter_2(h2)
    probs = softmax(a2 @ (head_w + head_delta_w) + (head_b + head_delta_b))

with ``adapter_k(h) = relu(h @ down_k + down_k_b) @ up_k + up_k_b``.  The
backbone is frozen once pretrained; an :class:`AdapterDelta` carries every
trainable parameter of a fine-tuned mode, including the head delta.
"""

from __future__ import annotations

import dataclasses
import zlib
from typing import Optional, Sequence

import numpy as np

PAD_ID = 0

DEFAULT_VOCAB = 4096
DEFAULT_DIM = 32
DEFAULT_RANK = 8
DEFAULT_CLASSES = 2
DEFAULT_MAX_LEN = 64
DEFAULT_EMBED_SCALE = 0.2

BACKBONE_VERSION = "adpmix-bow-v1"


class ConfigurationError(ValueError):
    """Parameter shapes do not fit together."""


class NumericError(FloatingPointError):
    """A non-finite value appeared during a forward or backward pass."""


# -- tokenization --------------------------------------------------------


def word_bucket(word: str, vocab_size: int) -> int:
    """Bucket of a single word: ``1 + crc32(lower(word)) mod (V - 1)``.

    Bucket 0 is reserved for padding, so real words never collide with it.
    """
    return 1 + zlib.crc32(word.lower().encode("utf-8")) % (vocab_size - 1)


def tokenize(text: str, vocab_size: int = DEFAULT_VOCAB, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    if vocab_size < 2 or max_len < 1:
        raise ValueError("need vocab_size >= 2 and max_len >= 1")
    ids = [word_bucket(w, vocab_size) for w in text.split()[:max_len]]
    return ids or [PAD_ID]


# -- parameter containers ------------------------------------------------


def _freeze(obj, names):
    for name in names:
        arr = np.array(getattr(obj, name), dtype=np.float64)  # private copy
        arr.setflags(write=False)
        object.__setattr__(obj, name, arr)


@dataclasses.dataclass(frozen=True)
class BackboneParams:
    embedding: np.ndarray  # V x d
    w1: np.ndarray  # d x d
    b1: np.ndarray  # d
    w2: np.ndarray
    b2: np.ndarray
    head_w: np.ndarray  # d x K
    head_b: np.ndarray  # K
    version: str = BACKBONE_VERSION

    ARRAYS = ("embedding", "w1", "b1", "w2", "b2", "head_w", "head_b")

    def __post_init__(self):
        _freeze(self, self.ARRAYS)
        V, d = self.embedding.shape
        K = self.head_b.shape[0]
        expected = {
            "w1": (d, d), "b1": (d,), "w2": (d, d), "b2": (d,), "head_w": (d, K),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigurationError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if not all(np.isfinite(getattr(self, n)).all() for n in self.ARRAYS):
            raise NumericError("backbone contains non-finite values")

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def num_classes(self) -> int:
        return self.head_b.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.ARRAYS]

    def replace_arrays(self, arrays: Sequence[np.ndarray], version: Optional[str] = None) -> "BackboneParams":
        return BackboneParams(*arrays, version=self.version if version is None else version)

    @classmethod
    def random(cls, rng: np.random.Generator, vocab_size=DEFAULT_VOCAB, dim=DEFAULT_DIM,
               num_classes=DEFAULT_CLASSES, scale=None, embed_scale=DEFAULT_EMBED_SCALE) -> "BackboneParams":
        # Small embeddings keep buckets never seen in pretraining close to the
        # origin, so out-of-lexicon words carry little signal until tuned.
        s = 1.0 / np.sqrt(dim) if scale is None else scale
        return cls(
            embedding=rng.normal(0.0, embed_scale, (vocab_size, dim)),
            w1=rng.normal(0.0, s, (dim, dim)),
            b1=np.zeros(dim),
            w2=rng.normal(0.0, s, (dim, dim)),
            b2=np.zeros(dim),
            head_w=rng.normal(0.0, s, (dim, num_classes)),
            head_b=np.zeros(num_classes),
        )


@dataclasses.dataclass(frozen=True)
class AdapterDelta:
    down1: np.ndarray  # d x r
    down1_b: np.ndarray  # r
    up1: np.ndarray  # r x d
    up1_b: np.ndarray  # d
    down2: np.ndarray
    down2_b: np.ndarray
    up2: np.ndarray
    up2_b: np.ndarray
    head_w: np.ndarray  # d x K, added to the backbone head
    head_b: np.ndarray  # K
    tag: str = ""

    ARRAYS = ("down1", "down1_b", "up1", "up1_b", "down2", "down2_b", "up2", "up2_b", "head_w", "head_b")

    def __post_init__(self):
        _freeze(self, self.ARRAYS)
        d, r = self.down1.shape
        K = self.head_b.shape[0]
        if r >= d:
            raise ConfigurationError(f"bottleneck rank {r} must be smaller than width {d}")
        expected = {
            "down1_b": (r,), "up1": (r, d), "up1_b": (d,),
            "down2": (d, r), "down2_b": (r,), "up2": (r, d), "up2_b": (d,),
            "head_w": (d, K),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigurationError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if not all(np.isfinite(getattr(self, n)).all() for n in self.ARRAYS):
            raise NumericError("adapter contains non-finite values")

    @property
    def dim(self) -> int:
        return self.down1.shape[0]

    @property
    def rank(self) -> int:
        return self.down1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.head_b.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.ARRAYS]

    def shapes(self) -> tuple:
        return tuple(a.shape for a in self.arrays())

    def replace_arrays(self, arrays: Sequence[np.ndarray], tag: Optional[str] = None) -> "AdapterDelta":
        return AdapterDelta(*arrays, tag=self.tag if tag is None else tag)

    @classmethod
    def zeros(cls, dim=DEFAULT_DIM, rank=DEFAULT_RANK, num_classes=DEFAULT_CLASSES, tag="") -> "AdapterDelta":
        d, r, K = dim, rank, num_classes
        return cls(
            np.zeros((d, r)), np.zeros(r), np.zeros((r, d)), np.zeros(d),
            np.zeros((d, r)), np.zeros(r), np.zeros((r, d)), np.zeros(d),
            np.zeros((d, K)), np.zeros(K), tag=tag,
        )

    @classmethod
    def init_small(cls, rng: np.random.Generator, dim=DEFAULT_DIM, rank=DEFAULT_RANK,
                   num_classes=DEFAULT_CLASSES, scale=1e-3, tag="") -> "AdapterDelta":
        """Bottleneck entries uniform in +-scale; head delta exactly zero."""
        z = cls.zeros(dim, rank, num_classes)
        arrays = [rng.uniform(-scale, scale, a.shape) for a in z.arrays()[:8]]
        arrays += [np.zeros((dim, num_classes)), np.zeros(num_classes)]
        return cls(*arrays, tag=tag)


def check_compatible(backbone: BackboneParams, adapter: AdapterDelta) -> None:
    if adapter.dim != backbone.dim or adapter.num_classes != backbone.num_classes:
        raise ConfigurationError(
            f"adapter (d={adapter.dim}, K={adapter.num_classes}) does not fit "
            f"backbone (d={backbone.dim}, K={backbone.num_classes})"
        )


# -- forward / backward --------------------------------------------------


def relu(x):
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def pool(backbone: BackboneParams, batch: Sequence[Sequence[int]]) -> np.ndarray:
    """Mean-pooled embeddings, one row per token sequence."""
    out = np.empty((len(batch), backbone.dim))
    for i, ids in enumerate(batch):
        if len(ids) == 0 or max(ids) >= backbone.vocab_size or min(ids) < 0:
            raise ConfigurationError(f"token ids out of range for vocabulary of {backbone.vocab_size}")
        out[i] = backbone.embedding[list(ids)].mean(axis=0)
    return out


def _bottleneck(h, down, down_b, up, up_b):
    z = h @ down + down_b
    return z, h + relu(z) @ up + up_b


def _forward_cache(backbone: BackboneParams, adapter: Optional[AdapterDelta], x: np.ndarray) -> dict:
    c = {"x": x}
    c["z1"] = x @ backbone.w1 + backbone.b1
    c["h1"] = relu(c["z1"])
    if adapter is None:
        c["a1"] = c["h1"]
    else:
        c["u1"], c["a1"] = _bottleneck(c["h1"], adapter.down1, adapter.down1_b, adapter.up1, adapter.up1_b)
    c["z2"] = c["a1"] @ backbone.w2 + backbone.b2
    c["h2"] = relu(c["z2"])
    if adapter is None:
        c["a2"] = c["h2"]
        head_w, head_b = backbone.head_w, backbone.head_b
    else:
        c["u2"], c["a2"] = _bottleneck(c["h2"], adapter.down2, adapter.down2_b, adapter.up2, adapter.up2_b)
        head_w, head_b = backbone.head_w + adapter.head_w, backbone.head_b + adapter.head_b
    c["logits"] = c["a2"] @ head_w + head_b
    c["probs"] = softmax(c["logits"])
    return c


def predict_proba(backbone: BackboneParams, adapter: Optional[AdapterDelta],
                  batch: Sequence[Sequence[int]]) -> np.ndarray:
    """Class probabilities for a batch of token sequences (n x K)."""
    if adapter is not None:
        check_compatible(backbone, adapter)
    return _forward_cache(backbone, adapter, pool(backbone, batch))["probs"]


def forward(backbone: BackboneParams, adapter: Optional[AdapterDelta], tokens: Sequence[int]) -> np.ndarray:
    """Class probabilities for one token sequence."""
    return predict_proba(backbone, adapter, [tokens])[0]


def _check_finite(cache: dict) -> None:
    for name, value in cache.items():
        if not np.isfinite(value).all():
            raise NumericError(f"non-finite values in '{name}'")


def _backward(backbone, adapter, cache, labels, want_backbone: bool):
    """Gradients of the batch-mean cross-entropy.

    Returns (loss, adapter grads or None, backbone grads or None, d loss/d pooled).
    """
    probs = cache["probs"]
    n = probs.shape[0]
    # log-softmax keeps the loss finite when a probability underflows to 0
    loss = -np.mean(log_softmax(cache["logits"])[np.arange(n), labels])
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    head_w = backbone.head_w if adapter is None else backbone.head_w + adapter.head_w
    g_head_w = cache["a2"].T @ dlogits
    g_head_b = dlogits.sum(axis=0)
    da2 = dlogits @ head_w.T

    ga = {}
    if adapter is None:
        dh2 = da2
    else:
        r2 = relu(cache["u2"])
        ga["up2"] = r2.T @ da2
        ga["up2_b"] = da2.sum(axis=0)
        du2 = (da2 @ adapter.up2.T) * (cache["u2"] > 0)
        ga["down2"] = cache["h2"].T @ du2
        ga["down2_b"] = du2.sum(axis=0)
        dh2 = da2 + du2 @ adapter.down2.T
    dz2 = dh2 * (cache["z2"] > 0)
    g_w2 = cache["a1"].T @ dz2
    g_b2 = dz2.sum(axis=0)
    da1 = dz2 @ backbone.w2.T
    if adapter is None:
        dh1 = da1
    else:
        r1 = relu(cache["u1"])
        ga["up1"] = r1.T @ da1
        ga["up1_b"] = da1.sum(axis=0)
        du1 = (da1 @ adapter.up1.T) * (cache["u1"] > 0)
        ga["down1"] = cache["h1"].T @ du1
        ga["down1_b"] = du1.sum(axis=0)
        dh1 = da1 + du1 @ adapter.down1.T
    dz1 = dh1 * (cache["z1"] > 0)
    dx = dz1 @ backbone.w1.T

    adapter_grads = None
    if adapter is not None:
        ga["head_w"] = g_head_w
        ga["head_b"] = g_head_b
        adapter_grads = adapter.replace_arrays([ga[n] for n in AdapterDelta.ARRAYS], tag=f"grad:{adapter.tag}")

    backbone_grads = None
    if want_backbone:
        backbone_grads = {
            "w1": cache["x"].T @ dz1, "b1": dz1.sum(axis=0),
            "w2": g_w2, "b2": g_b2, "head_w": g_head_w, "head_b": g_head_b,
        }
    return loss, adapter_grads, backbone_grads, dx


def adapter_loss_and_grad(backbone: BackboneParams, adapter: AdapterDelta,
                          batch: Sequence[Sequence[int]], labels) -> tuple[float, AdapterDelta]:
    """Batch-mean cross-entropy and its gradient w.r.t. every adapter parameter."""
    check_compatible(backbone, adapter)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.max() >= backbone.num_classes or labels.min() < 0):
        raise ValueError(f"labels must lie in [0, {backbone.num_classes})")
    with np.errstate(over="ignore", invalid="ignore"):  # reported by _check_finite instead
        cache = _forward_cache(backbone, adapter, pool(backbone, batch))
    _check_finite(cache)
    loss, grads, _, _ = _backward(backbone, adapter, cache, labels, want_backbone=False)
    return loss, grads


def adapter_gradient(backbone: BackboneParams, adapter: AdapterDelta, example) -> AdapterDelta:
    """Gradient of the cross-entropy of one ``(tokens, label)`` example."""
    tokens, label = example
    return adapter_loss_and_grad(backbone, adapter, [tokens], [label])[1]


def backbone_loss_and_grad(backbone: BackboneParams, batch: Sequence[Sequence[int]], labels):
    """Batch-mean cross-entropy of the adapterless model and gradients for all of its weights.

    The embedding gradient is returned as a dense V x d array.
    """
    labels = np.asarray(labels, dtype=np.int64)
    with np.errstate(over="ignore", invalid="ignore"):  # reported by _check_finite instead
        cache = _forward_cache(backbone, None, pool(backbone, batch))
    _check_finite(cache)
    loss, _, grads, dx = _backward(backbone, None, cache, labels, want_backbone=True)
    g_emb = np.zeros_like(backbone.embedding)
    for i, ids in enumerate(batch):
        np.add.at(g_emb, list(ids), dx[i] / len(ids))
    grads["embedding"] = g_emb
    return loss, grads


def cross_entropy(backbone: BackboneParams, adapter: Optional[AdapterDelta],
                  batch: Sequence[Sequence[int]], labels) -> float:
    logits = _forward_cache(backbone, adapter, pool(backbone, batch))["logits"]
    labels = np.asarray(labels, dtype=np.int64)
    return float(-np.mean(log_softmax(logits)[np.arange(len(labels)), labels]))
