import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcfpca.errors import FitError, ValidationError
from gcfpca.fpca import (
    align_sign,
    align_sign_matrix,
    estimate_eigensystem,
    evaluate_eigenfunctions,
    extended_domain,
    select_n_components,
)


def rank_one(I=300, K=100, lam=2.0, noise=0.05, seed=0):
    rng = np.random.default_rng(seed)
    s = np.arange(1, K + 1) / K
    phi = np.sqrt(2) * np.sin(2 * np.pi * s)
    xi = rng.normal(0, np.sqrt(lam), I)
    return np.outer(xi, phi) + noise * rng.standard_normal((I, K)), phi, xi


def test_rank_one_recovery():
    bhat, phi, xi = rank_one()
    es = estimate_eigensystem(bhat, pve=0.9)
    assert es.L == 1
    est = align_sign_matrix(es.eigenfunctions, phi[:, None])[:, 0]
    assert np.mean((est - phi) ** 2) < 1e-2
    assert es.eigenvalues[0] == pytest.approx(np.var(xi, ddof=1), rel=0.1)


def test_select_n_components_example():
    assert select_n_components([4, 2, 1, 1], 0.85) == 3
    assert select_n_components([4, 2, 1, 1], 1.0) == 4
    assert select_n_components([0, 0], 0.5) == 0
    with pytest.raises(ValidationError):
        select_n_components([1.0], 0.0)


def test_fixed_l_overrides_pve():
    bhat, _, _ = rank_one()
    es = estimate_eigensystem(bhat, pve=0.5, fixed_L=3)
    assert es.L == 3 and es.eigenfunctions.shape == (100, 3)
    assert np.all(np.diff(es.eigenvalues) <= 0)


def test_discrete_orthonormality():
    rng = np.random.default_rng(4)
    bhat = rng.standard_normal((50, 60)).cumsum(axis=1) / 5
    es = estimate_eigensystem(bhat, fixed_L=5)
    K = es.K
    assert np.max(np.abs(es.eigenfunctions.T @ es.eigenfunctions / K - np.eye(5))) < 1e-8


def test_dense_evaluation_is_nearly_orthonormal():
    K, I = 200, 400
    rng = np.random.default_rng(1)
    s = np.arange(1, K + 1) / K
    F0 = np.column_stack([np.ones(K), np.sqrt(2) * np.sin(2 * np.pi * s), np.sqrt(2) * np.cos(2 * np.pi * s)])
    bhat = rng.standard_normal((I, 3)) * np.sqrt([1.0, 0.5, 0.25]) @ F0.T + 0.05 * rng.standard_normal((I, K))
    es = estimate_eigensystem(bhat, fixed_L=3)
    lo, hi = extended_domain(es.grid)
    n = 20_000
    u = lo + (hi - lo) * (np.arange(n) + 0.5) / n
    F = evaluate_eigenfunctions(es, u)
    gram = F.T @ F / n  # the extended domain has unit length here
    assert hi - lo == pytest.approx(1.0)
    assert np.max(np.abs(gram - np.eye(3))) < 1e-3


def test_grid_evaluation_reproduces_eigenfunctions():
    bhat, _, _ = rank_one(K=50)
    es = estimate_eigensystem(bhat, fixed_L=2)
    np.testing.assert_allclose(evaluate_eigenfunctions(es, es.grid), es.eigenfunctions, atol=1e-10)


@pytest.mark.parametrize("K", [6, 12, 20])
def test_unsmoothed_full_basis_equals_raw_covariance(K):
    rng = np.random.default_rng(K)
    bhat = rng.standard_normal((30, K)) @ rng.standard_normal((K, K))
    es = estimate_eigensystem(bhat, n_smooth_basis=K, smoothing=0.0, fixed_L=K)
    C = np.cov(bhat, rowvar=False)
    w, U = np.linalg.eigh(C)
    w, U = w[::-1], U[:, ::-1]
    np.testing.assert_allclose(es.all_eigenvalues, np.clip(w, 0, None) / K, atol=1e-8 * w[0])
    top = 3
    est = align_sign_matrix(es.eigenfunctions[:, :top], U[:, :top])
    np.testing.assert_allclose(est, np.sqrt(K) * U[:, :top], atol=1e-8)


def test_sign_convention_positive_mean():
    bhat, _, _ = rank_one(K=40)
    es = estimate_eigensystem(-bhat, fixed_L=2)
    assert np.all(es.eigenfunctions.mean(axis=0) >= -1e-8)


def test_align_sign_examples():
    bhat, phi, _ = rank_one(K=40)
    es = estimate_eigensystem(bhat, fixed_L=1)
    flipped = align_sign(es, -es.eigenfunctions)
    np.testing.assert_array_equal(flipped.eigenfunctions, -es.eigenfunctions)
    np.testing.assert_array_equal(flipped.spline_coefs, -es.spline_coefs)
    same = align_sign(es, es.eigenfunctions)
    np.testing.assert_array_equal(same.eigenfunctions, es.eigenfunctions)
    with pytest.raises(ValidationError):
        align_sign(es, np.ones((40, 2)))


def test_masked_entries_use_pairwise_covariance():
    bhat, phi, xi = rank_one(I=400, K=60)
    mask = np.zeros_like(bhat, dtype=bool)
    rng = np.random.default_rng(9)
    mask[rng.random(bhat.shape) < 0.05] = True
    es = estimate_eigensystem(np.where(mask, 1e6, bhat), mask=mask, pve=0.9)
    est = align_sign_matrix(es.eigenfunctions, phi[:, None])[:, 0]
    assert np.mean((est - phi) ** 2) < 1e-2


def test_input_errors():
    with pytest.raises(FitError):
        estimate_eigensystem(np.zeros((10, 20)))
    with pytest.raises(ValidationError):
        estimate_eigensystem(np.ones((10, 8)), n_smooth_basis=9)
    with pytest.raises(ValidationError):
        bad = np.zeros((10, 8), dtype=bool)
        bad[:2, 3] = True
        estimate_eigensystem(np.random.default_rng(0).standard_normal((10, 8)), mask=bad)
    with pytest.raises(ValidationError):
        estimate_eigensystem(np.ones((1, 8)))
    with pytest.raises(ValidationError):
        estimate_eigensystem(np.ones((5, 8)), pve=None)


def test_extended_domain_adds_half_a_cell():
    lo, hi = extended_domain(np.arange(1, 11) / 10)
    assert lo == pytest.approx(0.05) and hi == pytest.approx(1.05)


@settings(max_examples=15)
@given(seed=st.integers(0, 1000), K=st.integers(10, 60), I=st.integers(5, 60))
def test_eigen_properties(seed, K, I):
    rng = np.random.default_rng(seed)
    bhat = rng.standard_normal((I, K)).cumsum(axis=1)
    es = estimate_eigensystem(bhat, pve=0.95)
    assert 1 <= es.L <= es.n_smooth_basis
    assert np.all(es.all_eigenvalues >= 0)
    assert np.all(np.diff(es.all_eigenvalues) <= 1e-12 * es.all_eigenvalues[0])
    assert np.max(np.abs(es.eigenfunctions.T @ es.eigenfunctions / K - np.eye(es.L))) < 1e-8
    assert es.pve >= 0.95 - 1e-9 or es.L == es.n_smooth_basis
