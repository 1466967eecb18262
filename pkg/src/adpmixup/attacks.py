"""Greedy black-box text attacks.

Attacks see the victim only through a prediction oracle: a callable mapping a
list of texts to an ``n x K`` array of class probabilities.  Every text sent
to the oracle counts as one query.

Kinds
-----
char_swap     best of four character bugs (swap, delete, insert, keyboard
              substitution) per word, TextBugger-style
char_noise    one seeded-random character bug per word, DeepWordBug-style
word_synonym  best synonym per word along a fixed deletion-importance order
word_greedy   like word_synonym but re-ranks the untouched words after
              every accepted substitution
"""

from __future__ import annotations

import dataclasses
import math
import string
import zlib
from importlib import resources
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .model import DEFAULT_MAX_LEN, AdapterDelta, BackboneParams, predict_proba, tokenize
from .training import LabeledDataset

Oracle = Callable[[Sequence[str]], np.ndarray]

CHAR_KINDS = ("char_swap", "char_noise")
WORD_KINDS = ("word_synonym", "word_greedy")
KINDS = CHAR_KINDS + WORD_KINDS


def _read_table(text: str) -> dict[str, str]:
    table = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, value = line.split("\t", 1)
        table[key.strip().lower()] = value.strip()
    return table


def load_synonyms(path=None, max_candidates: Optional[int] = None) -> dict[str, list[str]]:
    """Read a ``word<TAB>cand1,cand2,...`` sidecar; the shipped lexicon by default.

    ``max_candidates`` keeps only the first few candidates of each entry.
    """
    if path is None:
        text = resources.files("adpmixup.data").joinpath("synonyms.tsv").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    table = {w: [c.strip() for c in v.split(",") if c.strip()] for w, v in _read_table(text).items()}
    if max_candidates is not None:
        if max_candidates < 1:
            raise ValueError("max_candidates must be positive")
        table = {w: c[:max_candidates] for w, c in table.items()}
    return table


def load_keyboard() -> dict[str, str]:
    text = resources.files("adpmixup.data").joinpath("keyboard.tsv").read_text(encoding="utf-8")
    return _read_table(text)


KEYBOARD = load_keyboard()


@dataclasses.dataclass(frozen=True)
class AttackSpec:
    kind: str
    budget: float = 0.3
    max_queries: int = 500
    seed: int = 0
    synonym_table: Optional[Mapping[str, Sequence[str]]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 < self.budget <= 1.0:
            raise ValueError("budget must lie in (0, 1]")
        if self.max_queries < 1:
            raise ValueError("max_queries must be positive")
        if self.kind in WORD_KINDS and self.synonym_table is None:
            raise ValueError(f"{self.kind} needs a synonym table")

    def max_perturbed(self, n_words: int) -> int:
        # at least one word, never more than ceil(budget * n)
        return max(1, math.floor(self.budget * n_words + 1e-9))


@dataclasses.dataclass(frozen=True)
class AttackResult:
    original: tuple
    perturbed: str
    success: bool
    queries_used: int
    n_perturbed: int = 0


class QueryLimitReached(Exception):
    pass


class CountingOracle:
    """Wraps an oracle and refuses to exceed ``max_queries`` texts."""

    def __init__(self, oracle: Oracle, max_queries: Optional[int] = None):
        self.oracle = oracle
        self.max_queries = max_queries
        self.used = 0

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        if self.max_queries is not None and self.used + len(texts) > self.max_queries:
            raise QueryLimitReached
        self.used += len(texts)
        return np.asarray(self.oracle(list(texts)))


def make_oracle(backbone: BackboneParams, adapter: Optional[AdapterDelta],
                max_len: int = DEFAULT_MAX_LEN) -> Oracle:
    V = backbone.vocab_size

    def oracle(texts):
        return predict_proba(backbone, adapter, [tokenize(t, V, max_len) for t in texts])

    return oracle


def _drop(words, i):
    return " ".join(words[:i] + words[i + 1:])


def _replace(words, i, w):
    return " ".join(words[:i] + [w] + words[i + 1:])


def word_importance(oracle: Oracle, example, positions: Optional[Sequence[int]] = None) -> list[int]:
    """Word indices sorted by the drop in P(label) when each word is deleted.

    Descending importance, ties broken by lower index.  ``positions``
    restricts the ranking to a subset of word indices.
    """
    text, label = example
    words = text.split()
    if not words:
        raise ValueError("cannot rank words of an empty text")
    if positions is None:
        positions = range(len(words))
    positions = list(positions)
    probs = oracle([text] + [_drop(words, i) for i in positions])
    scores = probs[0, label] - probs[1:, label]
    return [positions[j] for j in sorted(range(len(positions)), key=lambda j: (-scores[j], positions[j]))]


def _bug(word: str, op: str, rng: np.random.Generator) -> Optional[str]:
    n = len(word)
    if op == "swap":
        if n < 2:
            return None
        i = int(rng.integers(n - 1))
        return word[:i] + word[i + 1] + word[i] + word[i + 2:]
    if op == "delete":
        if n < 2:
            return None
        i = int(rng.integers(n))
        return word[:i] + word[i + 1:]
    if op == "insert":
        i = int(rng.integers(n + 1))
        c = string.ascii_lowercase[int(rng.integers(26))]
        return word[:i] + c + word[i:]
    if op == "substitute":
        i = int(rng.integers(n))
        near = KEYBOARD.get(word[i].lower(), string.ascii_lowercase)
        return word[:i] + near[int(rng.integers(len(near)))] + word[i + 1:]
    raise ValueError(op)


_BUGS = ("swap", "delete", "insert", "substitute")


def _candidates(kind: str, word: str, rng: np.random.Generator, synonyms) -> list[str]:
    if kind == "char_swap":
        cands = [_bug(word, op, rng) for op in _BUGS]
    elif kind == "char_noise":
        cands = [_bug(word, _BUGS[int(rng.integers(len(_BUGS)))], rng)]
    else:
        cands = list(synonyms.get(word.lower(), ()))
    seen, out = set(), []
    for c in cands:
        if c and c != word and c not in seen:
            seen.add(c)
            out.append(c)
    return out


def attack(oracle: Oracle, example, spec: AttackSpec) -> AttackResult:
    text, label = example
    rng = np.random.default_rng([spec.seed, zlib.crc32(text.encode("utf-8"))])
    q = CountingOracle(oracle, spec.max_queries)
    words = text.split()
    n_perturbed = 0
    try:
        p = q([text])[0]
        if int(np.argmax(p)) != label:
            return AttackResult((text, label), text, True, q.used, 0)
        if not words:
            return AttackResult((text, label), text, False, q.used, 0)
        limit = spec.max_perturbed(len(words))
        order = word_importance(q, (text, label))
        while order and n_perturbed < limit:
            i = order.pop(0)
            cands = _candidates(spec.kind, words[i], rng, spec.synonym_table)
            if not cands:
                continue
            probs = q([_replace(words, i, c) for c in cands])
            best = int(np.argmin(probs[:, label]))
            if probs[best, label] >= p[label]:
                continue
            words[i] = cands[best]
            p = probs[best]
            n_perturbed += 1
            if int(np.argmax(p)) != label:
                return AttackResult((text, label), " ".join(words), True, q.used, n_perturbed)
            if spec.kind == "word_greedy" and order:
                order = word_importance(q, (" ".join(words), label), order)
    except QueryLimitReached:
        pass
    return AttackResult((text, label), " ".join(words), False, q.used, n_perturbed)


def attack_dataset(oracle: Oracle, dataset: LabeledDataset, spec: AttackSpec) -> list[AttackResult]:
    return [attack(oracle, ex, spec) for ex in dataset.items]


def generate_adversarial_dataset(oracle: Oracle, dataset: LabeledDataset, spec: AttackSpec,
                                 results: Optional[list] = None) -> LabeledDataset:
    """Successful perturbations paired with their original labels, in input order.

    Pass a list as ``results`` to also receive every :class:`AttackResult`.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out = attack_dataset(oracle, dataset, spec)
    if results is not None:
        results.extend(out)
    items = [(r.perturbed, r.original[1]) for r in out if r.success]
    return LabeledDataset(items, f"{dataset.name}:{spec.kind}")
