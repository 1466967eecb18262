"""Shared builders for small random models and token batches."""

import numpy as np
import pytest

from adpmixup.model import AdapterDelta, BackboneParams


def small_backbone(seed=0, vocab=50, dim=6, classes=3, scale=0.8, embed_scale=1.0):
    rng = np.random.default_rng(seed)
    bb = BackboneParams.random(rng, vocab, dim, classes, scale=scale, embed_scale=embed_scale)
    # nonzero biases so every term of the forward pass is exercised
    arrays = bb.arrays()
    arrays[2] = rng.normal(0, 0.3, dim)
    arrays[4] = rng.normal(0, 0.3, dim)
    arrays[6] = rng.normal(0, 0.3, classes)
    return bb.replace_arrays(arrays)


def random_adapter(rng, dim=6, rank=3, classes=3, scale=0.5, tag=""):
    z = AdapterDelta.zeros(dim, rank, classes)
    return z.replace_arrays([rng.uniform(-scale, scale, a.shape) for a in z.arrays()], tag=tag)


def random_batch(rng, vocab=50, n=5, max_words=6):
    return [list(rng.integers(0, vocab, size=int(rng.integers(1, max_words + 1)))) for _ in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[n])
