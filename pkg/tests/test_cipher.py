import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from flagcns import cipher as C


def contexts(scheme, n, seed=0, **kw):
    return [C.CipherContext(scheme, n, i, seed, **kw) for i in range(n)]


def test_fixed_point_word_for_half():
    ctx = C.CipherContext("plain", 1, 0)
    assert int(C.encrypt([0.5], ctx).payload[0]) == 8_388_608


def test_negative_values_two_complement():
    words = C.encode_fixed(np.array([-1.0]), 24)
    assert int(words[0]) == 2 ** 64 - 2 ** 24
    assert C.decode_fixed(words, 24)[0] == -1.0


def test_plain_round_trip_within_quantum():
    v = np.random.default_rng(0).uniform(-50, 50, 1000)
    out = C.decrypt(C.encrypt(v, C.CipherContext("plain", 1, 0)))
    assert np.abs(out - v).max() <= 2.0 ** -25


def test_overflow_and_nan_rejected():
    ctx = C.CipherContext("plain", 1, 0)
    with pytest.raises(C.CipherError):
        C.encrypt([2.0 ** 40], ctx)
    with pytest.raises(C.CipherError):
        C.encrypt([np.nan], ctx)


def test_clip_applies_after_weighting_and_is_counted():
    ctx = C.CipherContext("plain", 1, 0)
    c = C.encrypt([100.0, 200.0], ctx, weight=0.5, clip=True)
    np.testing.assert_allclose(C.decrypt(c), [50.0, 64.0])
    assert ctx.clipped == 1


def test_masks_cancel_exactly():
    for n in (2, 3, 5):
        total = sum((c.total_mask(7, 64) for c in contexts("mask", n)), np.zeros(64, dtype=np.uint64))
        assert not total.any()


def test_masks_depend_on_nonce_and_pair():
    a, b = contexts("mask", 3)[:2]
    assert not np.array_equal(a.total_mask(1, 8), a.total_mask(2, 8))
    assert not np.array_equal(a.mask_words(1, 1, 8), a.mask_words(2, 1, 8))
    np.testing.assert_array_equal(a.mask_words(1, 4, 8), b.mask_words(0, 4, 8))


def test_single_vector_unit_coefficient_identity():
    c = C.encrypt([1.25, -3.0], C.CipherContext("plain", 1, 0))
    agg = C.aggregate([c], [1.0])
    np.testing.assert_array_equal(agg.payload, c.payload)


def test_equal_vectors_thirds():
    v = np.array([0.3, -1.7, 5.0])
    ctxs = contexts("plain", 3)
    out = C.decrypt(C.aggregate([C.encrypt(v, c) for c in ctxs], [1 / 3] * 3))
    assert np.abs(out - v).max() <= 3 * 2.0 ** -20


def test_weighted_aggregate_matches_float_oracle():
    rng = np.random.default_rng(1)
    vs = rng.normal(size=(3, 50))
    w = rng.dirichlet(np.ones(3))
    out = C.decrypt(C.aggregate([C.encrypt(v, c) for v, c in zip(vs, contexts("plain", 3))], w))
    assert np.abs(out - w @ vs).max() <= 2.0 ** -20


def test_mask_scheme_requires_common_residual():
    ctxs = contexts("mask", 2)
    cs = [C.encrypt([1.0], c) for c in ctxs]
    with pytest.raises(C.CipherError):
        C.aggregate(cs, [0.25, 0.75])


def test_aggregate_losses_examples():
    w = C.AggregationWeights((1 / 3, 1 / 3, 1 / 3))
    reps = [C.encrypt([x], c, weight=wi) for x, c, wi in zip((0.3, 0.6, 0.9), contexts("mask", 3), w)]
    assert C.aggregate_losses(reps, w)[0] == pytest.approx(0.6, abs=2 ** -20)
    w = C.AggregationWeights((0.1, 0.3, 0.6))
    reps = [C.encrypt([1.0], c, weight=wi) for c, wi in zip(contexts("mask", 3), w)]
    assert C.aggregate_losses(reps, w)[0] == pytest.approx(1.0, abs=3 * 2 ** -24)


def test_aggregate_grads_cancellation_and_single_client():
    g = np.random.default_rng(2).normal(size=20)
    w = C.AggregationWeights.from_sizes([10, 10])
    reps = [C.encrypt(v, c, weight=wi / 4) for v, c, wi in zip((g, -g), contexts("mask", 2), w)]
    assert np.abs(C.decrypt(C.aggregate_grads(reps, w, 4))).max() <= 2 * 2.0 ** -24
    one = C.AggregationWeights((1.0,))
    rep = C.encrypt(g, C.CipherContext("mask", 1, 0), weight=1.0)
    assert np.abs(C.decrypt(C.aggregate_grads([rep], one, 1)) - g).max() <= 2.0 ** -24


def test_weight_zero_client_is_ignored():
    w = C.AggregationWeights.from_sizes([0, 5])
    reps = [C.encrypt([9.0], c, weight=wi) for c, wi in zip(contexts("mask", 2), w)]
    assert C.aggregate_losses(reps, w)[0] == pytest.approx(9.0, abs=2 ** -20)


def test_aggregation_weights_validation():
    with pytest.raises(C.CipherError):
        C.AggregationWeights((0.5, 0.4))
    with pytest.raises(C.CipherError):
        C.AggregationWeights((1.5, -0.5))
    with pytest.raises(C.CipherError):
        C.AggregationWeights.from_sizes([0, 0])


def test_length_and_scheme_mismatch():
    p = C.CipherContext("plain", 1, 0)
    with pytest.raises(C.CipherError):
        C.aggregate([C.encrypt([1.0], p), C.encrypt([1.0, 2.0], p)], [0.5, 0.5])
    m = C.CipherContext("mask", 2, 0)
    with pytest.raises(C.CipherError):
        C.aggregate([C.encrypt([1.0], p), C.encrypt([1.0], m)], [0.5, 0.5])


def test_round_shift_half_even():
    words = np.array([3, 5, -3, -5, 7], dtype=np.int64).view(np.uint64)  # /2 -> 1.5 2.5 -1.5 -2.5 3.5
    out = C._round_shift(words, 1).view(np.int64)
    np.testing.assert_array_equal(out, [2, 2, -2, -2, 4])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 40), st.integers(0, 2 ** 32 - 1))
def test_mask_equals_plain_property(n, length, seed):
    rng = np.random.default_rng(seed)
    vs = rng.uniform(-10, 10, (n, length))
    w = C.AggregationWeights(tuple(rng.dirichlet(np.ones(n))))
    plain = C.decrypt(C.aggregate([C.encrypt(v, c) for v, c in zip(vs, contexts("plain", n))], w))
    masked = C.decrypt(C.aggregate([C.encrypt(v, c, nonce=3, weight=wi)
                                    for v, c, wi in zip(vs, contexts("mask", n, seed), w)], w))
    assert np.abs(masked - plain).max() <= n * 2.0 ** -20


def test_masked_report_words_look_uniform():
    """Top byte of a single client's masked words, across re-keyed runs, passes chi-square."""
    top = []
    for key in range(400):
        ctx = C.CipherContext("mask", 3, 0, run_seed=key)
        c = C.encrypt(np.full(16, 0.25), ctx, nonce=1)
        top.append((c.payload >> np.uint64(56)).astype(np.int64))
    counts = np.bincount(np.concatenate(top), minlength=256)
    assert stats.chisquare(counts).pvalue > 0.001
