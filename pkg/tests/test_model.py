import copy

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adpmixup.model import (
    PAD_ID,
    AdapterDelta,
    BackboneParams,
    ConfigurationError,
    NumericError,
    _forward_cache,
    adapter_gradient,
    adapter_loss_and_grad,
    backbone_loss_and_grad,
    check_compatible,
    cross_entropy,
    forward,
    pool,
    predict_proba,
    softmax,
    tokenize,
    word_bucket,
)

from conftest import random_adapter, random_batch, small_backbone


def crc32_bitwise(data: bytes) -> int:
    """Reflected CRC-32 (polynomial 0xEDB88320), one bit at a time."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


class TestTokenize:
    def test_empty_text_is_pad_only(self):
        assert tokenize("", 64) == [PAD_ID]
        assert tokenize("   \t ", 64) == [PAD_ID]

    def test_good_movie_against_bitwise_crc(self):
        ids = tokenize("good movie", 64)
        expected = [1 + crc32_bitwise(w.encode()) % 63 for w in ("good", "movie")]
        assert ids == expected
        assert all(0 < i < 64 for i in ids)

    def test_known_crc_check_value(self):
        # standard CRC-32 check value for the ASCII digits 1..9
        assert crc32_bitwise(b"123456789") == 0xCBF43926

    @given(st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=12),
           st.integers(2, 5000))
    def test_bucket_matches_oracle(self, word, V):
        assert word_bucket(word, V) == 1 + crc32_bitwise(word.lower().encode("utf-8")) % (V - 1)

    @given(st.lists(st.sampled_from(["a", "Good", "movie", "x1", "été"]), max_size=20), st.integers(1, 8))
    def test_truncation_and_range(self, words, max_len):
        ids = tokenize(" ".join(words), 97, max_len)
        assert 1 <= len(ids) <= max_len
        assert all(0 <= i < 97 for i in ids)

    def test_deterministic_and_case_insensitive(self):
        assert tokenize("The Movie", 4096) == tokenize("the movie", 4096)
        assert tokenize("a b c", 4096) == tokenize("a b c", 4096)

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            tokenize("x", 1)
        with pytest.raises(ValueError):
            tokenize("x", 10, 0)


class TestParams:
    def test_arrays_are_readonly_copies(self):
        src = np.zeros((4, 2))
        bb = BackboneParams(src, np.eye(2), np.zeros(2), np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
        src[0, 0] = 5.0
        assert bb.embedding[0, 0] == 0.0
        with pytest.raises(ValueError):
            bb.embedding[0, 0] = 1.0

    def test_shape_validation(self):
        with pytest.raises(ConfigurationError):
            BackboneParams(np.zeros((4, 2)), np.eye(3), np.zeros(2), np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))

    def test_non_finite_rejected(self):
        bad = np.zeros((4, 2))
        bad[1, 1] = np.nan
        with pytest.raises(NumericError):
            BackboneParams(bad, np.eye(2), np.zeros(2), np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))

    def test_rank_must_be_below_width(self):
        with pytest.raises(ConfigurationError):
            AdapterDelta.zeros(dim=4, rank=4)

    def test_init_small_ranges(self, rng):
        a = AdapterDelta.init_small(rng, 8, 3, 2)
        for arr in a.arrays()[:8]:
            assert np.all(np.abs(arr) <= 1e-3)
        assert not a.head_w.any() and not a.head_b.any()

    def test_incompatible_adapter(self):
        bb = small_backbone(dim=6, classes=3)
        with pytest.raises(ConfigurationError):
            check_compatible(bb, AdapterDelta.zeros(dim=5, rank=2, num_classes=3))
        with pytest.raises(ConfigurationError):
            forward(bb, AdapterDelta.zeros(dim=6, rank=2, num_classes=2), [1, 2])


def mp_forward(bb, ad, ids, dps=50):
    """Arbitrary-precision forward pass written out loop by loop."""
    mpmath.mp.dps = dps
    M = lambda a: [[mpmath.mpf(float(v)) for v in row] for row in np.atleast_2d(a)]
    V = lambda a: [mpmath.mpf(float(v)) for v in a]

    def matvec(x, W):
        return [mpmath.fsum(x[i] * W[i][j] for i in range(len(x))) for j in range(len(W[0]))]

    relu = lambda v: [max(mpmath.mpf(0), t) for t in v]
    add = lambda a, b: [s + t for s, t in zip(a, b)]
    emb = M(bb.embedding)
    x = [mpmath.fsum(emb[i][k] for i in ids) / len(ids) for k in range(bb.dim)]
    h = relu(add(matvec(x, M(bb.w1)), V(bb.b1)))
    if ad is not None:
        h = add(h, add(matvec(relu(add(matvec(h, M(ad.down1)), V(ad.down1_b))), M(ad.up1)), V(ad.up1_b)))
    h = relu(add(matvec(h, M(bb.w2)), V(bb.b2)))
    head_w, head_b = M(bb.head_w), V(bb.head_b)
    if ad is not None:
        h = add(h, add(matvec(relu(add(matvec(h, M(ad.down2)), V(ad.down2_b))), M(ad.up2)), V(ad.up2_b)))
        head_w = [add(r1, r2) for r1, r2 in zip(head_w, M(ad.head_w))]
        head_b = add(head_b, V(ad.head_b))
    logits = add(matvec(h, head_w), head_b)
    e = [mpmath.exp(t) for t in logits]
    s = mpmath.fsum(e)
    return [float(t / s) for t in e]


class TestForward:
    def test_hand_set_two_dim_model(self):
        # d=2, K=2, one token, identity layers: logits = relu(relu(e)) = e
        bb = BackboneParams(np.array([[0.0, 0.0], [1.0, -0.5]]), np.eye(2), np.zeros(2), np.eye(2), np.zeros(2),
                            np.eye(2), np.zeros(2))
        p = forward(bb, None, [1])
        # logits (1, 0) -> p0 = e / (e + 1)
        e = mpmath.e
        assert p[0] == pytest.approx(float(e / (e + 1)), abs=1e-15)
        assert p[1] == pytest.approx(float(1 / (e + 1)), abs=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_arbitrary_precision_oracle(self, seed):
        rng = np.random.default_rng(seed)
        bb = small_backbone(seed)
        ad = random_adapter(rng) if seed % 2 else None
        ids = random_batch(rng, n=1)[0]
        np.testing.assert_allclose(forward(bb, ad, ids), mp_forward(bb, ad, ids), rtol=0, atol=1e-13)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 30.0))
    def test_probabilities_normalized(self, seed, scale):
        rng = np.random.default_rng(seed)
        bb = small_backbone(seed % 7, scale=scale)
        ad = random_adapter(rng, scale=scale)
        probs = predict_proba(bb, ad, random_batch(rng, n=4))
        assert np.all(probs >= 0) and np.all(probs <= 1)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_zero_adapter_is_noop(self, rng):
        bb = small_backbone(3)
        batch = random_batch(rng, n=20)
        np.testing.assert_array_equal(predict_proba(bb, AdapterDelta.zeros(6, 3, 3), batch),
                                      predict_proba(bb, None, batch))

    def test_softmax_stable_for_large_logits(self):
        p = softmax(np.array([[1000.0, 0.0, -1000.0]]))
        assert np.isfinite(p).all() and p[0, 0] == 1.0

    def test_forward_is_pure(self, rng):
        bb = small_backbone(1)
        ad = random_adapter(rng)
        before = (copy.deepcopy(bb.arrays()), copy.deepcopy(ad.arrays()))
        forward(bb, ad, [1, 2, 3])
        for a, b in zip(before[0] + before[1], bb.arrays() + ad.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_out_of_range_ids(self):
        bb = small_backbone(vocab=10)
        with pytest.raises(ConfigurationError):
            pool(bb, [[10]])
        with pytest.raises(ConfigurationError):
            pool(bb, [[]])


def _kink_free(bb, ad, batch, margin):
    c = _forward_cache(bb, ad, pool(bb, batch))
    return all(np.min(np.abs(c[k])) > margin for k in ("z1", "z2", "u1", "u2") if k in c)


def _flat(arrays):
    return np.concatenate([np.ravel(a) for a in arrays])


def finite_difference(loss, arrays, h=1e-4):
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (loss(plus) - loss(minus)) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b):
    a, b = _flat(a), _flat(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def random_kink_free_config(seed, margin=1e-3):
    """A random (backbone, adapter, batch, labels) whose ReLU inputs avoid 0 by ``margin``.

    Central differences with step h move each pre-activation by far less
    than ``margin``, so the loss is smooth over the stencil.
    """
    rng = np.random.default_rng(seed)
    while True:
        bb = small_backbone(int(rng.integers(1 << 30)), vocab=30, dim=5, classes=3)
        ad = random_adapter(rng, dim=5, rank=2, classes=3)
        batch = random_batch(rng, vocab=30, n=3, max_words=4)
        labels = rng.integers(0, 3, size=3)
        if _kink_free(bb, ad, batch, margin):
            return bb, ad, batch, labels


class TestGradients:
    def test_adapter_gradient_vs_central_differences(self):
        worst = 0.0
        for seed in range(100):
            bb, ad, batch, labels = random_kink_free_config(seed)
            _, grad = adapter_loss_and_grad(bb, ad, batch, labels)
            loss = lambda arrs: cross_entropy(bb, ad.replace_arrays(arrs), batch, labels)
            fd = finite_difference(loss, [a.copy() for a in ad.arrays()])
            worst = max(worst, relative_error(grad.arrays(), fd))
        assert worst < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_backbone_gradient_vs_central_differences(self, seed):
        bb, _, batch, labels = random_kink_free_config(seed)
        while not _kink_free(bb, None, batch, 1e-3):
            seed += 1000
            bb, _, batch, labels = random_kink_free_config(seed)
        _, grads = backbone_loss_and_grad(bb, batch, labels)
        loss = lambda arrs: cross_entropy(bb.replace_arrays(arrs), None, batch, labels)
        fd = finite_difference(loss, [a.copy() for a in bb.arrays()])
        assert relative_error([grads[n] for n in bb.ARRAYS], fd) < 1e-4

    def test_single_example_gradient_matches_batch_form(self, rng):
        bb = small_backbone(2)
        ad = random_adapter(rng)
        g = adapter_gradient(bb, ad, ([1, 4, 9], 2))
        _, g2 = adapter_loss_and_grad(bb, ad, [[1, 4, 9]], [2])
        for a, b in zip(g.arrays(), g2.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_bit_identical_repeat(self, rng):
        bb = small_backbone(2)
        ad = random_adapter(rng)
        g1 = adapter_gradient(bb, ad, ([3, 3, 7], 1))
        g2 = adapter_gradient(bb, ad, ([3, 3, 7], 1))
        for a, b in zip(g1.arrays(), g2.arrays()):
            assert a.tobytes() == b.tobytes()

    def test_stationary_at_saturated_minimum(self):
        # one class with a huge head bias: loss ~ 0 and the gradient vanishes
        d, K = 4, 2
        bb = BackboneParams(np.ones((5, d)) * 0.1, np.eye(d), np.zeros(d), np.eye(d), np.zeros(d),
                            np.zeros((d, K)), np.array([60.0, 0.0]))
        g = adapter_gradient(bb, AdapterDelta.zeros(d, 2, K), ([1, 2], 0))
        assert np.linalg.norm(_flat(g.arrays())) < 1e-8

    def test_non_finite_raises_numeric_error(self):
        bb = small_backbone(0)
        ad = random_adapter(np.random.default_rng(0), scale=1e200)
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericError):
            adapter_gradient(bb, ad, ([1, 2], 0))
