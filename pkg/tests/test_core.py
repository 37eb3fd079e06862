import math
import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsharp.core import NO_THRESHOLD, SeededRng, TensorSet, flatvec, norm2, percentile_threshold

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("v, expected", [([3, 4], 5.0), ([0, 0, 0], 0.0), ([1, 1, 1, 1], 2.0)])
def test_norm2_examples(v, expected):
    assert norm2(np.array(v, dtype=float)) == expected


def test_norm2_handles_extreme_scales():
    assert norm2(np.array([3e-200, 4e-200])) == pytest.approx(5e-200, rel=1e-15)
    assert norm2(np.array([3e200, 4e200])) == pytest.approx(5e200, rel=1e-15)


@given(st.lists(finite, min_size=1, max_size=40), st.floats(-1e3, 1e3, allow_nan=False))
def test_norm2_homogeneous(vals, a):
    v = np.array(vals)
    assert norm2(a * v) == pytest.approx(abs(a) * norm2(v), rel=1e-12, abs=1e-300)


def test_norm2_zero_iff_zero_vector():
    assert norm2(np.zeros(5)) == 0.0
    assert norm2(np.array([0, 0, 1e-300])) > 0.0


def test_flatvec_rejects_non_finite():
    with pytest.raises(ValueError):
        flatvec([1.0, math.nan])
    with pytest.raises(ValueError):
        flatvec([math.inf])
    assert flatvec([[1, 2], [3, 4]]).tolist() == [1.0, 2.0, 3.0, 4.0]


def _nearest_rank(values, qp):
    a = sorted(values)
    k = math.floor(qp * len(a))
    return -math.inf if k == 0 else a[k - 1]


def test_percentile_examples():
    t = percentile_threshold([1, 2, 3, 4, 5], 0.8)
    assert t == 4.0
    assert [v for v in [1, 2, 3, 4, 5] if v > t] == [5]

    assert percentile_threshold([7, 7, 7], 0.0) == NO_THRESHOLD == -math.inf

    t = percentile_threshold([2, 2, 2, 2], 0.5)
    assert t == 2.0
    assert sum(v > t for v in [2, 2, 2, 2]) == 0


def test_percentile_errors():
    with pytest.raises(ValueError, match="empty percentile input"):
        percentile_threshold([], 0.5)
    with pytest.raises(ValueError):
        percentile_threshold([1.0], 1.0)


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=50), st.floats(0, 0.999), st.randoms())
def test_percentile_matches_sorting_and_is_permutation_invariant(vals, qp, rnd):
    expected = _nearest_rank(vals, qp)
    assert percentile_threshold(vals, qp) == expected
    shuffled = list(vals)
    rnd.shuffle(shuffled)
    assert percentile_threshold(shuffled, qp) == expected


@given(st.sets(st.floats(0, 1e6), min_size=1, max_size=60), st.floats(0, 0.999))
def test_distinct_values_kept_count(vals, qp):
    vals = list(vals)
    t = percentile_threshold(vals, qp)
    assert sum(v > t for v in vals) == len(vals) - math.floor(qp * len(vals))


def test_rng_is_reproducible_bitwise():
    a = SeededRng(42)
    b = SeededRng(42)
    for _ in range(3):
        assert a.raw(17).tobytes() == b.raw(17).tobytes()
    assert SeededRng(42).normal(101).tobytes() == SeededRng(42).normal(101).tobytes()
    assert SeededRng(42).normal(10).tobytes() != SeededRng(43).normal(10).tobytes()
    assert SeededRng(42, 1).uniform(5).tobytes() != SeededRng(42, 2).uniform(5).tobytes()


def test_rng_known_stream():
    # frozen Philox-4x64 output for key (7, 0); guards against backend drift
    words = [int(w) for w in SeededRng(7).raw(3)]
    assert words == [16086915834549238692, 5448529601018347655, 7749434361382612120]
    # Box-Muller recomputed by hand from the first two words
    u1 = ((words[0] >> 11) + 1) * 2.0**-53
    u2 = ((words[1] >> 11) + 1) * 2.0**-53
    r = math.sqrt(-2.0 * math.log(u1))
    z = SeededRng(7).normal(2)
    assert z[0] == pytest.approx(r * math.cos(2 * math.pi * u2), rel=1e-15)
    assert z[1] == pytest.approx(r * math.sin(2 * math.pi * u2), rel=1e-15)
    u = SeededRng(7).uniform(1000)
    assert np.all((u > 0) & (u <= 1))


def test_rng_normal_moments():
    z = SeededRng(3).normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01
    # Box-Muller tails: fraction beyond 2 sigma ~ 0.0455
    assert abs(np.mean(np.abs(z) > 2) - 0.0455) < 0.003


def test_rng_permutation_and_integers():
    p = SeededRng(5).permutation(50)
    assert sorted(p.tolist()) == list(range(50))
    ints = SeededRng(5).integers(1, 4, 1000)
    assert set(ints.tolist()) == {1, 2, 3}


def test_tensorset_flatten_roundtrip_and_layout():
    ts = TensorSet.from_pairs([("w", np.arange(6.0).reshape(2, 3)), ("b", np.array([7.0, 8.0]))])
    assert ts.total_dim == 8
    assert ts.flatten().tolist() == [0, 1, 2, 3, 4, 5, 7, 8]
    back = ts.unflatten(ts.flatten())
    assert back.bitwise_equal(ts)
    assert back.shapes == ((2, 3), (2,))
    other = TensorSet.from_pairs([("w", np.zeros((3, 2))), ("b", np.zeros(2))])
    with pytest.raises(ValueError, match="shape mismatch"):
        ts + other
    assert ts.digest() == back.digest()
    assert pickle.loads(pickle.dumps(ts)).bitwise_equal(ts)
