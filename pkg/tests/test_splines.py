import numpy as np
import pytest

from tvcure.splines import build_basis, build_penalty, recenter


def cox_de_boor(x, k, i, t):
    # textbook recursion, deliberately independent of the scipy-backed path
    if k == 0:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    c1 = 0.0
    if t[i + k] != t[i]:
        c1 = (x - t[i]) / (t[i + k] - t[i]) * cox_de_boor(x, k - 1, i, t)
    c2 = 0.0
    if t[i + k + 1] != t[i + 1]:
        c2 = (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * cox_de_boor(x, k - 1, i + 1, t)
    return c1 + c2


def test_partition_of_unity_at_interior_points():
    basis = build_basis(0.0, 299.0, 10)
    rng = np.random.default_rng(1)
    x = rng.uniform(0.0, 299.0, size=1000)
    values = basis.eval(x)
    assert np.all(values >= 0.0)
    assert np.max(np.abs(values.sum(axis=1) - 1.0)) < 1e-10


def test_simulation_sized_basis_has_ten_columns():
    basis = build_basis(0.0, 299.0, 10)
    assert basis.eval(np.array([10.0, 100.0])).shape == (2, 10)


def test_eval_matches_cox_de_boor_recursion():
    basis = build_basis(0.0, 10.0, 8, degree=3)
    x0 = 4.321
    got = basis.eval(x0)
    expected = np.array(
        [cox_de_boor(x0, basis.degree, i, basis.knots) for i in range(basis.n_basis)]
    )
    assert np.max(np.abs(got - expected)) < 1e-12


def test_locality_of_basis_support():
    basis = build_basis(-2.0, 5.0, 12, degree=3)
    rng = np.random.default_rng(2)
    for x in rng.uniform(-2.0, 5.0, size=200):
        assert np.count_nonzero(basis.eval(x)) <= basis.degree + 1


def test_eval_clamps_out_of_domain_values():
    basis = build_basis(0.0, 1.0, 6)
    clamped, n_outside = basis.clamp(np.array([-0.5, 0.5, 1.2]))
    assert n_outside == 2
    assert np.allclose(basis.eval(np.array([-0.5, 1.2])), basis.eval(np.array([0.0, 1.0])))
    assert np.allclose(clamped, [0.0, 0.5, 1.0])


def test_build_basis_rejects_bad_arguments():
    with pytest.raises(ValueError):
        build_basis(1.0, 1.0, 10)
    with pytest.raises(ValueError):
        build_basis(0.0, 1.0, 3, degree=3)


def test_second_differences_of_a_line_are_unpenalized():
    penalty = build_penalty(5, order=2)
    line = 0.7 + 1.3 * np.arange(5.0)
    assert abs(line @ penalty.matrix @ line) < 1e-12


def test_penalty_rank():
    assert build_penalty(10, order=2).rank == 8


def test_penalty_quadratic_form_matches_difference_sum():
    penalty = build_penalty(9, order=2)
    rng = np.random.default_rng(3)
    theta = rng.normal(size=9)
    direct = np.sum(np.diff(theta, n=2) ** 2)
    assert abs(theta @ penalty.matrix @ theta - direct) < 1e-12


def test_penalty_is_positive_semidefinite():
    penalty = build_penalty(12, order=3)
    rng = np.random.default_rng(4)
    for _ in range(100):
        v = rng.normal(size=12)
        assert v @ penalty.matrix @ v >= -1e-12


def test_build_penalty_rejects_order_not_below_dimension():
    with pytest.raises(ValueError):
        build_penalty(4, order=4)
    with pytest.raises(ValueError):
        build_penalty(4, order=0)


def test_centering_of_partition_of_unity():
    # centering all L+1 columns turns the constant function into zero
    centered = recenter(build_basis(0.0, 1.5, 11))
    x = np.linspace(0.0, 1.5, 57)
    full = centered.base.eval(x) - centered.column_means
    assert np.max(np.abs(full.sum(axis=1))) < 1e-12


def test_column_means_match_trapezoid_oracle():
    centered = recenter(build_basis(0.0, 1.5, 11), quadrature_points=1000)
    grid = np.linspace(0.0, 1.5, 1000)
    expected = np.trapezoid(centered.base.eval(grid), grid, axis=0) / 1.5
    assert np.max(np.abs(centered.column_means - expected)) < 1e-8


def test_retained_columns_average_to_zero():
    centered = recenter(build_basis(-1.0, 2.0, 11))
    grid = np.linspace(-1.0, 2.0, 1000)
    averages = np.trapezoid(centered.eval(grid), grid, axis=0) / 3.0
    assert np.max(np.abs(averages)) < 1e-8


def test_n_effective_drops_one_column():
    centered = recenter(build_basis(0.0, 1.0, 11))
    assert centered.n_effective == 10
    assert centered.eval(np.array([0.3, 0.9])).shape == (2, 10)
