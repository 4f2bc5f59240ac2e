import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nonlocal_traffic.grid_basis import (
    PolyField,
    adaptive_integrate,
    build_grid,
    chebyshev_reference_nodes,
    eval_field,
    gauss_legendre_rule,
    lagrange_basis_eval,
    l2_error,
    mean_weights,
)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 13, 20])
def test_gauss_legendre_matches_numpy(n):
    rule = gauss_legendre_rule(n)
    x, w = np.polynomial.legendre.leggauss(n)
    assert np.allclose(rule.points, x, atol=1e-14)
    assert np.allclose(rule.weights, w, atol=1e-14)


@given(n=st.integers(1, 12))
def test_gauss_legendre_exact_for_polynomials(n):
    rule = gauss_legendre_rule(n)
    for k in range(2 * n):
        exact = 0.0 if k % 2 else 2.0 / (k + 1)
        assert rule.integrate(lambda x: x**k) == pytest.approx(exact, abs=1e-13)


def test_gauss_legendre_rejects_bad_order():
    with pytest.raises(ValueError):
        gauss_legendre_rule(0)
    with pytest.raises(ValueError):
        gauss_legendre_rule(2.5)


def test_mapped_rule_integrates_on_interval():
    rule = gauss_legendre_rule(4)
    assert rule.integrate(lambda x: x**3, 0.0, 2.0) == pytest.approx(4.0, rel=1e-14)


def test_adaptive_integrate_with_breakpoints():
    got = adaptive_integrate(np.abs, -1.0, 2.0, breakpoints=np.array([0.0]))
    assert got == pytest.approx(2.5, rel=1e-13)
    assert adaptive_integrate(np.exp, 0.0, 1.0) == pytest.approx(math.e - 1, rel=1e-13)


def test_chebyshev_nodes_end_at_unit_interval():
    for p in range(1, 7):
        xi = chebyshev_reference_nodes(p)
        assert xi.size == p + 1
        assert xi[0] == pytest.approx(-1.0) and xi[-1] == pytest.approx(1.0)
        assert np.all(np.diff(xi) > 0)
        assert np.allclose(xi, -xi[::-1])


def test_cubic_nodes_on_unit_cell():
    # oracle: roots of T_4 scaled by cos(pi/8), mapped to [0, 1]
    grid = build_grid(0.0, 1.0, 1, 3)
    inner = grid.nodes[0, 1:3]
    assert inner[0] == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)
    assert inner[1] == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_build_grid_rejects_bad_input():
    with pytest.raises(ValueError):
        build_grid(1.0, 1.0, 4, 1)
    with pytest.raises(ValueError):
        build_grid(0.0, 1.0, 0, 1)
    with pytest.raises(ValueError):
        build_grid(0.0, 1.0, 4, 0)


def test_grid_partition_and_cell_lookup():
    grid = build_grid(0.0, 2.0, 4, 2)
    assert grid.dx == pytest.approx(0.5)
    assert np.allclose(grid.partition, [0, 0.5, 1.0, 1.5, 2.0])
    assert list(grid.cell_of(np.array([0.0, 0.5, 1.99, 2.0]))) == [0, 1, 3, 3]
    assert list(grid.cell_of(np.array([0.5]), "left")) == [0]
    with pytest.raises(ValueError):
        grid.check_inside(np.array([2.5]))


@given(p=st.integers(1, 5), x=st.floats(0.0, 1.0))
def test_lagrange_partition_of_unity(p, x):
    grid = build_grid(0.0, 1.0, 1, p)
    vals = [lagrange_basis_eval(grid, 0, i, x) for i in range(p + 1)]
    assert sum(v for v, _ in vals) == pytest.approx(1.0, abs=1e-12)
    assert sum(d for _, d in vals) == pytest.approx(0.0, abs=1e-9)


def test_lagrange_kronecker_property():
    grid = build_grid(0.0, 1.0, 3, 2)
    for i in range(3):
        for j in range(3):
            v, _ = lagrange_basis_eval(grid, 1, i, grid.nodes[1, j])
            assert v == pytest.approx(1.0 if i == j else 0.0, abs=1e-12)


def test_lagrange_basis_errors():
    grid = build_grid(0.0, 1.0, 2, 1)
    with pytest.raises(IndexError):
        lagrange_basis_eval(grid, 5, 0, 0.1)
    with pytest.raises(ValueError):
        lagrange_basis_eval(grid, 0, 0, 0.9)


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_interpolation_reproduces_polynomials(p):
    grid = build_grid(-1.0, 1.0, 5, p)
    f = lambda x: 0.3 + x**p - 0.5 * x
    field = PolyField.interpolate(grid, f)
    x = np.linspace(-1.0, 1.0, 101)
    assert np.allclose(field(x), f(x), atol=1e-12)
    assert l2_error(field, f) < 1e-12


@given(p=st.integers(1, 5))
def test_mean_weights_sum_to_one(p):
    assert mean_weights(p).sum() == pytest.approx(1.0, abs=1e-14)


def test_integral_of_interpolant():
    grid = build_grid(0.0, 1.0, 8, 2)
    field = PolyField.interpolate(grid, lambda x: x * x)
    assert field.integral() == pytest.approx(1.0 / 3.0, abs=1e-14)


def test_eval_field_side_at_interfaces():
    grid = build_grid(0.0, 1.0, 2, 1)
    coeffs = np.array([[0.0, 1.0], [3.0, 4.0]])
    field = PolyField(grid, coeffs)
    assert eval_field(field, 0.5, "left") == pytest.approx(1.0)
    assert eval_field(field, 0.5, "right") == pytest.approx(3.0)
    assert np.allclose(field.left_traces(), [0.0, 3.0])
    assert np.allclose(field.right_traces(), [1.0, 4.0])


def test_polyfield_shape_checked():
    grid = build_grid(0.0, 1.0, 2, 1)
    with pytest.raises(ValueError):
        PolyField(grid, np.zeros((3, 2)))


@settings(max_examples=30)
@given(n=st.integers(2, 16), p=st.integers(1, 3))
def test_l2_error_decreases_under_refinement(n, p):
    f = lambda x: np.sin(2 * np.pi * x)
    coarse = l2_error(PolyField.interpolate(build_grid(0.0, 1.0, n, p), f), f)
    fine = l2_error(PolyField.interpolate(build_grid(0.0, 1.0, 2 * n, p), f), f)
    assert fine < coarse
