import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loraga.linalg import (NonFiniteError, best_rank_k, frobenius_norm, random_orthonormal_columns,
                           svd, tail_energy)


def _assert_svd_invariants(m, f, tol=1e-10):
    k = min(m.shape)
    assert f.u.shape == (m.shape[0], k) and f.v.shape == (m.shape[1], k)
    np.testing.assert_allclose(f.u.T @ f.u, np.eye(k), atol=tol)
    np.testing.assert_allclose(f.v.T @ f.v, np.eye(k), atol=tol)
    assert np.all(np.diff(f.s) <= 0) and np.all(f.s >= 0)
    norm = np.linalg.norm(m)
    if norm > 0:
        assert np.linalg.norm(f.reconstruct() - m) / norm <= tol


def test_svd_diagonal():
    f = svd(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(f.s, [3, 2, 1])
    for q in (f.u, f.v):
        assert np.allclose(np.abs(q), np.eye(3))


def test_svd_zero_matrix():
    f = svd(np.zeros((2, 2)))
    np.testing.assert_array_equal(f.s, [0.0, 0.0])


def test_svd_random_reconstruction():
    m = np.random.default_rng(3).standard_normal((5, 4))
    _assert_svd_invariants(m, svd(m))


def test_svd_sign_convention_and_determinism():
    m = np.random.default_rng(4).standard_normal((7, 5))
    f = svd(m)
    cols = np.arange(f.u.shape[1])
    assert np.all(f.u[np.argmax(np.abs(f.u), axis=0), cols] >= 0)
    g = svd(m.copy())
    np.testing.assert_array_equal(f.u, g.u)
    np.testing.assert_array_equal(f.v, g.v)
    # flipping the input flips v, not u
    h = svd(-m)
    np.testing.assert_allclose(h.u, f.u, atol=1e-12)
    np.testing.assert_allclose(h.v, -f.v, atol=1e-12)


def test_svd_rejects_non_finite_with_index():
    m = np.ones((3, 3))
    m[1, 2] = np.nan
    with pytest.raises(NonFiniteError) as exc:
        svd(m)
    assert exc.value.index == (1, 2)
    assert "(1, 2)" in str(exc.value)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_svd_invariants_property(m):
    f = svd(m)
    k = min(m.shape)
    np.testing.assert_allclose(f.u.T @ f.u, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(f.v.T @ f.v, np.eye(k), atol=1e-10)
    assert np.all(np.diff(f.s) <= 0) and np.all(f.s >= 0)
    norm = np.linalg.norm(m)
    if norm > 0:
        assert np.linalg.norm(f.reconstruct() - m) <= 1e-10 * norm


def test_frobenius_examples():
    assert frobenius_norm(np.eye(3)) == pytest.approx(math.sqrt(3), rel=1e-15)
    assert frobenius_norm([[3.0, 4.0]]) == 5.0
    m = np.random.default_rng(0).standard_normal((8, 6))
    oracle = math.sqrt(sum(float(v) ** 2 for v in m.ravel()))
    assert frobenius_norm(m) == pytest.approx(oracle, rel=1e-12)


def test_frobenius_no_overflow():
    assert frobenius_norm([[1e200, 1e200]]) == pytest.approx(math.sqrt(2) * 1e200)


def test_best_rank_k_full_rank_reconstructs():
    m = np.random.default_rng(1).standard_normal((6, 4))
    np.testing.assert_allclose(best_rank_k(m, 4), m, atol=1e-10)


def test_best_rank_k_known_spectrum():
    m = np.diag([5.0, 4.0, 3.0, 2.0, 1.0])
    approx = best_rank_k(m, 2)
    np.testing.assert_allclose(approx, np.diag([5.0, 4.0, 0, 0, 0]), atol=1e-12)
    assert frobenius_norm(m - approx) == pytest.approx(math.sqrt(14), rel=1e-12)


def test_best_rank_k_out_of_range():
    with pytest.raises(ValueError):
        best_rank_k(np.eye(3), 4)
    with pytest.raises(ValueError):
        best_rank_k(np.eye(3), 0)


def test_best_rank_k_beats_random_competitors():
    rng = np.random.default_rng(7)
    for _ in range(200):
        m = rng.standard_normal((10, 8))
        best = frobenius_norm(m - best_rank_k(m, 2))
        rival = rng.standard_normal((10, 2)) @ rng.standard_normal((2, 8))
        # a rival with the best scalar fit along its own direction is still no better
        c = np.sum(rival * m) / np.sum(rival * rival)
        assert best <= frobenius_norm(m - c * rival) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**31 - 1))
def test_eckart_young_residual(m, n, seed):
    a = np.random.default_rng(seed).standard_normal((m, n))
    k = 1 + seed % min(m, n)
    resid = frobenius_norm(a - best_rank_k(a, k))
    pred = tail_energy(np.linalg.svd(a, compute_uv=False), k)
    assert resid == pytest.approx(pred, rel=1e-9, abs=1e-12)


def test_random_orthonormal_square():
    q = random_orthonormal_columns(4, 4, seed=0)
    np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-10)
    assert abs(abs(np.linalg.det(q)) - 1) <= 1e-10


def test_random_orthonormal_determinism():
    np.testing.assert_array_equal(random_orthonormal_columns(9, 3, 42),
                                  random_orthonormal_columns(9, 3, 42))
    assert not np.array_equal(random_orthonormal_columns(9, 3, 42),
                              random_orthonormal_columns(9, 3, 43))


def test_random_orthonormal_count_exceeds_dim():
    with pytest.raises(ValueError):
        random_orthonormal_columns(3, 4, 0)


def test_random_orthonormal_sphere_moments():
    # unit-sphere coordinates: E[x_i] = 0, E[x_i^2] = 1/n
    dim, count, seeds = 64, 8, 1000
    draws = np.stack([random_orthonormal_columns(dim, count, s) for s in range(seeds)])
    per_seed_mean = draws.mean(axis=(1, 2))
    per_seed_sq = (draws ** 2).mean(axis=(1, 2))
    for vals, target in ((per_seed_mean, 0.0), (per_seed_sq, 1.0 / dim)):
        se = vals.std(ddof=1) / math.sqrt(seeds)
        assert abs(vals.mean() - target) <= 5 * se


def test_svd_convergence_failure_reports_attempts(monkeypatch):
    import scipy.linalg

    from loraga.linalg import SvdConvergenceError

    def fail(*args, **kwargs):
        raise np.linalg.LinAlgError("SVD did not converge")

    monkeypatch.setattr(scipy.linalg, "svd", fail)
    with pytest.raises(SvdConvergenceError) as exc:
        svd(np.eye(3))
    assert exc.value.attempts == 2
    assert "did not converge" in str(exc.value)
