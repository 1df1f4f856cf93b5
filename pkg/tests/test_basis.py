import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gcfpca.basis import (
    SplineBasis,
    bspline_basis,
    difference_operator,
    difference_penalty,
    evaluate_bspline_basis,
    evaluate_closed_form_basis,
    penalty_rank,
)
from gcfpca.errors import DomainError, ValidationError


def test_degree_zero_single_span_is_indicator():
    basis = SplineBasis(np.array([0.0, 1.0]), degree=0)
    assert basis.n_basis == 1
    np.testing.assert_array_equal(basis([0.5]), [[1.0]])


def test_uniform_cubic_at_interior_knot_hand_values():
    # uniform knots 0..10, evaluate at knot 5: the three non-zero cubic B-splines are 1/6, 2/3, 1/6
    basis = SplineBasis(np.arange(11.0), degree=3, domain=(3.0, 7.0))
    row = basis([5.0])[0]
    nz = row[row > 1e-14]
    np.testing.assert_allclose(nz, [1 / 6, 2 / 3, 1 / 6], atol=1e-14)


def test_n_basis_formula_matches_knot_count():
    for M in (4, 7, 14, 20):
        b = bspline_basis(M, (0.0, 1.0))
        assert b.n_basis == M == b.knot_vector.size - b.degree - 1
        assert b(np.linspace(0, 1, 5)).shape == (5, M)


def test_partition_of_unity_at_many_points():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, 10_000)
    B = bspline_basis(14, (0.0, 1.0))(x)
    assert np.max(np.abs(B.sum(axis=1) - 1.0)) < 1e-12
    assert np.all(B >= 0)


def test_endpoints_are_covered():
    B = bspline_basis(9, (-2.0, 3.0))([-2.0, 3.0])
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-14)
    assert B[0, 0] == pytest.approx(1.0) and B[1, -1] == pytest.approx(1.0)


def test_local_support():
    basis = bspline_basis(12, (0.0, 1.0))
    knots = basis.knot_vector
    x = np.linspace(0, 1, 2001)
    B = basis(x)
    for m in range(basis.n_basis):
        lo, hi = knots[m], knots[m + basis.degree + 1]
        outside = (x < lo) | (x > hi)
        assert np.all(B[outside, m] == 0.0)


def test_point_outside_domain_raises():
    basis = bspline_basis(6, (0.0, 1.0))
    with pytest.raises(DomainError):
        basis([1.0001])
    with pytest.raises(DomainError):
        evaluate_bspline_basis(basis, [-0.5])


@pytest.mark.parametrize(
    "knots,degree",
    [([0.0, 0.5, 0.2, 1.0, 1.0, 1.0, 1.0, 1.0], 3), ([0.0, 1.0], 3), ([0.0, np.nan, 1.0, 1.0], 0)],
)
def test_malformed_knot_vector_raises(knots, degree):
    with pytest.raises(ValidationError):
        SplineBasis(np.array(knots), degree=degree)


def test_cyclic_basis_partition_and_periodicity():
    basis = bspline_basis(10, (0.0, 2.0), cyclic=True)
    assert basis.n_basis == 10
    x = np.linspace(0, 2, 401)
    B = basis(x)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(B[0], B[-1], atol=1e-12)


def test_difference_operator_example():
    np.testing.assert_array_equal(difference_operator(4, 2), [[1, -2, 1, 0], [0, 1, -2, 1]])
    D = difference_operator(4, 2)
    np.testing.assert_array_equal(difference_penalty(4, 2), D.T @ D)


def test_penalty_annihilates_constants_and_linear_trends():
    P = difference_penalty(4, 2)
    assert np.ones(4) @ P @ np.ones(4) == 0
    v = np.array([1.0, 2.0, 3.0, 4.0])
    assert v @ P @ v == 0


@pytest.mark.parametrize("M", [4, 5, 14, 30])
def test_penalty_rank_and_null_space(M):
    P = difference_penalty(M, 2)
    ev = np.linalg.eigvalsh(P)
    assert np.sum(ev < 1e-10 * ev.max()) == 2
    assert penalty_rank(M, 2) == M - 2
    np.testing.assert_allclose(P, P.T)
    assert ev.min() > -1e-12


def test_penalty_requires_m_above_order():
    with pytest.raises(ValidationError):
        difference_penalty(2, 2)


def test_cyclic_penalty_rank():
    P = difference_penalty(8, 2, cyclic=True)
    ev = np.linalg.eigvalsh(P)
    assert np.sum(ev < 1e-10 * ev.max()) == 1 == 8 - penalty_rank(8, 2, cyclic=True)


def test_closed_form_examples():
    assert evaluate_closed_form_basis("fourier", 1, [0.25])[0, 0] == pytest.approx(np.sqrt(2), abs=1e-15)
    row = evaluate_closed_form_basis("orthogonal_polynomial", 4, [0.0])[0]
    np.testing.assert_allclose(row, [1, -np.sqrt(3), np.sqrt(5), -np.sqrt(7)], atol=1e-14)


def test_fourier_discrete_gram_on_fine_grid():
    K = 1000
    s = np.arange(1, K + 1) / K
    F = evaluate_closed_form_basis("fourier", 4, s)
    assert np.max(np.abs(F.T @ F / K - np.eye(4))) < 5e-3


@pytest.mark.parametrize("kind", ["fourier", "orthogonal_polynomial"])
def test_closed_form_continuous_orthonormality(kind):
    n = 10_000
    s = (np.arange(n) + 0.5) / n  # composite midpoint rule
    F = evaluate_closed_form_basis(kind, 4, s)
    assert np.max(np.abs(F.T @ F / n - np.eye(4))) < 1e-6


def test_closed_form_errors():
    with pytest.raises(ValidationError):
        evaluate_closed_form_basis("fourier", 5, [0.5])
    with pytest.raises(ValidationError):
        evaluate_closed_form_basis("wavelet", 2, [0.5])
    with pytest.raises(DomainError):
        evaluate_closed_form_basis("fourier", 2, [1.5])


@given(
    M=st.integers(4, 25),
    a=st.floats(-100, 100, allow_nan=False),
    width=st.floats(0.1, 1000),
    u=st.lists(st.floats(0, 1), min_size=1, max_size=30),
)
def test_partition_of_unity_property(M, a, width, u):
    basis = bspline_basis(M, (a, a + width))
    x = a + width * np.asarray(u)
    B = basis(x)
    assert np.all(B >= -1e-15)
    assert np.max(np.abs(B.sum(axis=1) - 1)) < 1e-12


@given(M=st.integers(3, 40), order=st.integers(1, 3), c0=st.floats(-5, 5), c1=st.floats(-5, 5))
def test_penalty_null_space_property(M, order, c0, c1):
    if M <= order:
        return
    P = difference_penalty(M, order)
    v = c0 + c1 * np.arange(M) if order >= 2 else np.full(M, c0)
    assert abs(v @ P @ v) < 1e-8 * (1 + np.sum(v**2))
