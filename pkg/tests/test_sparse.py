import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestlap.latent import ar1_precision
from nestlap.sparse import (DimensionMismatch, NotPositiveDefinite, SparseSymmetric, factorize, kron,
                            marginal_variances, solve)


def ar1_cov(n, prec, rho):
    i = np.arange(n)
    return rho ** np.abs(i[:, None] - i[None, :]) / prec


def random_spd(rng, n, density=0.1):
    A = np.where(rng.uniform(size=(n, n)) < density, rng.normal(size=(n, n)), 0.0)
    A = np.tril(A, -1)
    A = A + A.T
    A += np.diag(np.abs(A).sum(axis=1) + rng.uniform(0.1, 2.0, size=n))
    return A


def test_scalar_logdet():
    h = factorize(SparseSymmetric.from_dense([[2.0]]))
    assert h.logdet == pytest.approx(math.log(2.0), abs=1e-15)
    assert solve(h, np.array([4.0])) == pytest.approx([2.0])


def test_identity():
    h = factorize(SparseSymmetric.identity(5))
    assert h.logdet == 0.0
    b = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    np.testing.assert_array_equal(solve(h, b), b)
    np.testing.assert_array_equal(marginal_variances(factorize(SparseSymmetric.identity(4))), np.ones(4))


def test_diag_variances():
    np.testing.assert_allclose(marginal_variances(factorize(SparseSymmetric.diag([2.0, 4.0]))), [0.5, 0.25])


def test_ar1_precision_entries_and_logdet():
    Q = ar1_precision(3, 1.0, 0.5)
    D = Q.to_dense()
    np.testing.assert_allclose(np.diag(D), [4 / 3, 5 / 3, 4 / 3], atol=1e-14)
    np.testing.assert_allclose([D[0, 1], D[1, 2], D[0, 2]], [-2 / 3, -2 / 3, 0.0], atol=1e-14)
    oracle = -np.linalg.slogdet(ar1_cov(3, 1.0, 0.5))[1]
    assert factorize(Q).logdet == pytest.approx(oracle, abs=1e-12)


def test_ar1_solve_first_column():
    h = factorize(ar1_precision(3, 1.0, 0.5))
    np.testing.assert_allclose(solve(h, np.array([1.0, 0.0, 0.0])), ar1_cov(3, 1.0, 0.5)[:, 0], atol=1e-12)


def test_ar1_stationary_variances():
    v = marginal_variances(factorize(ar1_precision(10, 1.0, 0.5)))
    np.testing.assert_allclose(v, np.ones(10), atol=1e-12)


def test_not_positive_definite():
    with pytest.raises(NotPositiveDefinite):
        factorize(SparseSymmetric.from_dense([[1.0, 2.0], [2.0, 1.0]]))


def test_solve_dimension_mismatch():
    h = factorize(SparseSymmetric.identity(3))
    with pytest.raises(DimensionMismatch):
        solve(h, np.ones(4))


def test_kron_examples():
    B = SparseSymmetric.from_dense([[2.0, -1.0], [-1.0, 3.0]])
    I2 = SparseSymmetric.identity(2)
    D = kron(I2, B).to_dense()
    np.testing.assert_array_equal(D, np.kron(np.eye(2), B.to_dense()))
    np.testing.assert_array_equal(kron(SparseSymmetric.from_dense([[2.0]]), B).to_dense(), 2 * B.to_dense())
    A = ar1_precision(3, 1.0, 0.5)
    K = kron(A, SparseSymmetric.diag([1.0, 2.0]))
    np.testing.assert_allclose(K.to_dense(), np.kron(A.to_dense(), np.diag([1.0, 2.0])), atol=1e-15)


def test_kron_cap():
    with pytest.raises(OverflowError):
        kron(SparseSymmetric.identity(100), SparseSymmetric.identity(100), cap=1000)


def test_kron_logdet_rule():
    A = ar1_precision(4, 2.0, 0.3)
    B = SparseSymmetric.from_dense(random_spd(np.random.default_rng(0), 5, 0.5))
    got = factorize(kron(A, B)).logdet
    assert got == pytest.approx(5 * factorize(A).logdet + 4 * factorize(B).logdet, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 200), density=st.floats(0.005, 0.2))
def test_factor_properties(seed, n, density):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, n, density)
    Q = SparseSymmetric.from_dense(A)
    h = factorize(Q)
    L = h.factor.toarray()
    P = np.eye(n)[h.perm]
    rec = P.T @ L @ L.T @ P
    assert np.linalg.norm(rec - A) <= 1e-10 * np.linalg.norm(A)
    np.testing.assert_allclose(marginal_variances(h), np.diag(np.linalg.inv(A)), rtol=0, atol=1e-10)
    b = rng.normal(size=n)
    x = solve(h, b)
    assert np.linalg.norm(A @ x - b) <= 1e-8 * np.linalg.norm(b)
    assert h.logdet == pytest.approx(np.linalg.slogdet(A)[1], rel=1e-10, abs=1e-10)


def test_block_solve():
    rng = np.random.default_rng(1)
    A = random_spd(rng, 30, 0.2)
    B = rng.normal(size=(30, 4))
    X = solve(factorize(SparseSymmetric.from_dense(A)), B)
    np.testing.assert_allclose(A @ X, B, atol=1e-10)


def test_ordering_is_deterministic():
    A = random_spd(np.random.default_rng(2), 60, 0.1)
    h1 = factorize(SparseSymmetric.from_dense(A))
    h2 = factorize(SparseSymmetric.from_dense(A.copy()))
    np.testing.assert_array_equal(h1.perm, h2.perm)
    np.testing.assert_array_equal(h1.lx, h2.lx)


def test_concurrent_factorizations_do_not_interfere():
    rng = np.random.default_rng(3)
    mats = [random_spd(rng, 40, 0.1) for _ in range(8)]
    expected = [np.linalg.slogdet(A)[1] for A in mats]
    with ThreadPoolExecutor(4) as ex:
        got = list(ex.map(lambda A: factorize(SparseSymmetric.from_dense(A)).logdet, mats))
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_from_coo_sums_duplicates_and_keeps_zeros():
    Q = SparseSymmetric.from_coo(3, [0, 0, 2, 1], [0, 0, 1, 2], [1.0, 2.0, 0.0, 0.5])
    D = Q.to_dense()
    assert D[0, 0] == 3.0
    assert D[1, 2] == D[2, 1] == 0.5
    assert Q.nnz == 4   # three diagonal slots plus (2, 1)
