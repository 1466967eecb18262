"""Template-generated two-class keyword sentiment corpus.

Label 1 is positive.  A sentence is one or more short clauses joined by
"and", each built around one polarity word.  With probability ``noise`` a
clause takes the opposite polarity, but such clauses always stay a strict
minority, so the majority polarity decides the label and a handful of words
carry most of the evidence.
"""

from __future__ import annotations

import numpy as np

from .training import LabeledDataset

POSITIVE = ("good", "great", "excellent", "wonderful", "amazing",
            "superb", "delightful", "brilliant", "enjoyable", "moving")
NEGATIVE = ("bad", "terrible", "awful", "horrible", "dreadful",
            "boring", "poor", "dull", "disappointing", "mediocre")
NOUNS = ("movie", "film", "plot", "acting", "story", "ending", "script",
         "soundtrack", "cast", "direction", "pacing", "dialogue")
ADVERBS = ("really", "quite", "truly", "somewhat", "very", "rather")
OPENERS = ("i think", "honestly", "overall", "in my opinion", "to be fair", "frankly")

_CLAUSES = (
    "the {n} was {v} {a}",
    "a {a} {n}",
    "the {n} felt {a}",
    "{v} {a} {n}",
    "the {n} is {a}",
)


def _sentence(rng: np.random.Generator, label: int, noise: float, clauses: tuple) -> str:
    own, other = (POSITIVE, NEGATIVE) if label == 1 else (NEGATIVE, POSITIVE)
    k = int(rng.integers(clauses[0], clauses[1] + 1))
    # at most a strict minority of clauses take the opposite polarity
    flips = rng.random(k) < noise
    while flips.sum() * 2 >= k:
        flips[np.flatnonzero(flips)[0]] = False
    nouns = rng.permutation(len(NOUNS))
    parts = []
    for i in range(k):
        pool = other if flips[i] else own
        clause = _CLAUSES[int(rng.integers(len(_CLAUSES)))]
        parts.append(clause.format(n=NOUNS[nouns[i % len(NOUNS)]], a=pool[int(rng.integers(len(pool)))],
                                   v=ADVERBS[int(rng.integers(len(ADVERBS)))]))
    text = " and ".join(parts)
    if rng.random() < 0.5:
        text = OPENERS[int(rng.integers(len(OPENERS)))] + " " + text
    return text


def make_corpus(n: int, seed: int, noise: float = 0.2, clauses: tuple = (1, 2),
                name: str = "sentiment") -> LabeledDataset:
    """Balanced corpus of ``n`` sentences with ``clauses[0]..clauses[1]`` clauses each.

    Deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    return LabeledDataset([(_sentence(rng, int(y), noise, clauses), int(y)) for y in labels], name)
