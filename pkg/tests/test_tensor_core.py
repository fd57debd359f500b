import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moelab import tensor_core as tc
from moelab.errors import InvalidArgumentError, InvalidInputError

mpmath.mp.dps = 50

finite_vectors = arrays(np.float64, st.integers(1, 20),
                        elements=st.floats(-50, 50, allow_nan=False))


def mp_softmax(z, tau=1):
    e = [mpmath.exp(mpmath.mpf(v) / tau) for v in z]
    s = mpmath.fsum(e)
    return [x / s for x in e]


def test_softmax_symmetric_pair():
    np.testing.assert_array_equal(tc.softmax([0.0, 0.0]), [0.5, 0.5])


@pytest.mark.parametrize("c,tau", [(0.0, 1.0), (7.5, 0.3), (-100.0, 4.0)])
def test_softmax_constant_vector_is_uniform(c, tau):
    np.testing.assert_allclose(tc.softmax([c] * 4, tau), [0.25] * 4, atol=1e-15)


def test_softmax_matches_high_precision():
    expected = [float(v) for v in mp_softmax([1, 2, 3])]
    np.testing.assert_allclose(tc.softmax([1.0, 2.0, 3.0]), expected, rtol=0, atol=1e-12)


def test_softmax_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        tc.softmax([0.0, np.nan])
    with pytest.raises(InvalidInputError):
        tc.softmax([np.inf, 0.0])
    with pytest.raises(InvalidArgumentError):
        tc.softmax([0.0, 1.0], temperature=0.0)


@given(finite_vectors, st.floats(0.05, 20))
def test_softmax_is_probability_vector(z, tau):
    p = tc.softmax(z, tau)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-12


@given(finite_vectors, st.floats(-1e3, 1e3), st.floats(0.1, 10))
def test_softmax_shift_invariance(z, c, tau):
    np.testing.assert_allclose(tc.softmax(z + c, tau), tc.softmax(z, tau), atol=1e-12)


def test_top_k_examples():
    assert tc.top_k([0.1, 0.9, 0.5], 2).tolist() == [1, 2]
    assert tc.top_k([0.5, 0.5, 0.5], 2).tolist() == [0, 1]
    with pytest.raises(InvalidArgumentError):
        tc.top_k([1.0, 2.0], 0)
    with pytest.raises(InvalidArgumentError):
        tc.top_k([1.0, 2.0], 3)


def sort_oracle(s, k):
    return sorted(sorted(range(len(s)), key=lambda i: (-s[i], i))[:k])


def test_top_k_matches_sort_oracle(rng):
    for _ in range(50):
        s = rng.normal(size=128)
        assert tc.top_k(s, 8).tolist() == sort_oracle(s.tolist(), 8)
    # heavy ties
    s = rng.integers(0, 4, size=128).astype(float)
    assert tc.top_k(s, 8).tolist() == sort_oracle(s.tolist(), 8)


def test_top_k_rows(rng):
    s = rng.normal(size=(10, 6))
    out = tc.top_k(s, 3)
    assert out.shape == (10, 3)
    for row, sel in zip(s, out):
        assert sel.tolist() == sort_oracle(row.tolist(), 3)


@given(st.lists(st.integers(0, 3), min_size=2, max_size=12), st.data())
def test_top_k_selected_values_are_permutation_invariant(values, data):
    k = data.draw(st.integers(1, len(values)))
    perm = data.draw(st.permutations(range(len(values))))
    s = np.array(values, dtype=float)
    a = sorted(s[tc.top_k(s, k)])
    b = sorted(s[perm][tc.top_k(s[perm], k)])
    assert a == b


def test_kl_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert tc.kl_divergence(p, p) == 0.0
    assert tc.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-15)
    with pytest.raises(InvalidArgumentError):
        tc.kl_divergence([1.0], [0.5, 0.5])


def test_kl_matches_high_precision(rng):
    p = rng.dirichlet(np.ones(50))
    q = rng.dirichlet(np.ones(50))
    expected = mpmath.fsum(mpmath.mpf(a) * mpmath.log(mpmath.mpf(a) / mpmath.mpf(b))
                           for a, b in zip(p, q))
    assert abs(tc.kl_divergence(p, q) - float(expected)) < 1e-12


@given(st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_kl_nonnegative(n, seed):
    r = np.random.default_rng(seed)
    p, q = r.dirichlet(np.ones(n)), r.dirichlet(np.ones(n))
    assert tc.kl_divergence(p, q) >= -1e-12
    assert abs(tc.kl_divergence(p, p)) <= 1e-12


def test_l1_examples(rng):
    assert tc.l1_distance([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert tc.l1_distance([1.0, 0.0], [0.0, 1.0]) == 2.0
    a, b = rng.normal(size=30), rng.normal(size=30)
    assert tc.l1_distance(a, b) == pytest.approx(sum(abs(x - y) for x, y in zip(a, b)), abs=1e-12)
    with pytest.raises(InvalidArgumentError):
        tc.l1_distance([1.0], [1.0, 2.0])


def test_svd_rank_one_and_identity(rng):
    u, v = rng.normal(size=7), rng.normal(size=5)
    W = np.outer(u, v)
    assert np.linalg.norm(W - tc.low_rank(W, 1)) < 1e-10
    I = np.eye(4)
    U, S, V = tc.truncated_svd(I, 4)
    np.testing.assert_allclose((U * S) @ V.T, I, atol=1e-14)


def test_svd_errors_match_eigen_oracle(rng):
    W = rng.normal(size=(16, 32))
    prev = np.inf
    for r in range(1, 17):
        U, S, V = tc.truncated_svd(W, r)
        assert U.shape == (16, r) and S.shape == (r,) and V.shape == (32, r)
        assert np.all(np.diff(S) <= 0) and np.all(S >= 0)
        err = np.linalg.norm(W - (U * S) @ V.T)
        # eigen-oracle from the 16x16 Gram side
        ev = np.sort(np.clip(np.linalg.eigvalsh(W @ W.T), 0, None))[::-1]
        assert abs(err - np.sqrt(ev[r:].sum())) < 1e-8
        assert err <= prev + 1e-12
        prev = err
    assert prev < 1e-8


def test_svd_rank_out_of_range():
    with pytest.raises(InvalidArgumentError):
        tc.truncated_svd(np.ones((3, 4)), 0)
    with pytest.raises(InvalidArgumentError):
        tc.truncated_svd(np.ones((3, 4)), 4)


def test_entropy():
    assert tc.entropy([0.25] * 4) == pytest.approx(np.log(4), abs=1e-15)
    assert tc.entropy([1.0, 0.0, 0.0]) == 0.0
