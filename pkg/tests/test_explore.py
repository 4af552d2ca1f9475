import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from nestlap.datasets import ar1_replicates
from nestlap.explore import (IndefiniteHessian, PointBudgetExceeded, batch_evaluator, ccd_design, ccd_points,
                             explore_grid, find_mode, z_map)
from nestlap.pipeline import RunConfig, fit


def gaussian_logdens(mode, P):
    mode, P = np.asarray(mode, float), np.asarray(P, float)
    return lambda t: -0.5 * (t - mode) @ P @ (t - mode)


def test_mode_one_dimensional_against_golden_section():
    f = lambda t: 3.0 * t[0] - math.exp(t[0]) - 0.1 * t[0] ** 2
    x, fx, H = find_mode(f, np.array([0.0]))
    ref = minimize_scalar(lambda s: -f([s]), bracket=(-1, 0, 3), method="golden", tol=1e-10).x
    assert x[0] == pytest.approx(ref, abs=1e-4)


def test_hessian_of_quadratic():
    P = np.array([[3.0, 0.8, 0.0], [0.8, 2.0, -0.5], [0.0, -0.5, 1.0]])
    mode = np.array([0.5, -1.0, 2.0])
    x, fx, H = find_mode(gaussian_logdens(mode, P), np.zeros(3))
    np.testing.assert_allclose(x, mode, atol=1e-4)
    np.testing.assert_allclose(H, P, atol=1e-3)


def test_z_map_axis_example():
    zm = z_map(np.array([1.0, 2.0]), np.diag([4.0, 1.0]))
    # the smaller-variance direction comes first
    np.testing.assert_allclose(zm.theta([1.0, 0.0]), [1.5, 2.0])
    np.testing.assert_allclose(zm.theta([0.0, 1.0]), [1.0, 3.0])
    np.testing.assert_allclose(zm.Sigma, np.diag([0.25, 1.0]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_z_map_round_trip(a, z):
    L = np.array([[1.0 + abs(a[0]), 0.0], [a[1], 0.5 + abs(a[2])]])
    H = L @ L.T
    zm = z_map(np.array([a[3], -a[3]]), H)
    theta = zm.theta(np.array(z))
    np.testing.assert_allclose(zm.z(theta), z, atol=1e-12)
    np.testing.assert_allclose(zm.Sigma, np.linalg.inv(H), atol=1e-10)


def test_grid_one_dimensional_standard_normal():
    f = gaussian_logdens([0.0], [[1.0]])
    zm = z_map(np.zeros(1), np.eye(1))
    grid = explore_grid(batch_evaluator(f), zm, 0.0)
    np.testing.assert_array_equal(grid.z[:, 0], [-2, -1, 0, 1, 2])
    total = np.sum(np.exp(grid.logdens) * grid.weight)
    assert total == pytest.approx(math.sqrt(2 * math.pi), rel=0.02)


def test_grid_mode_has_largest_density():
    P = np.array([[2.0, 0.6], [0.6, 1.0]])
    f = gaussian_logdens([0.3, -0.2], P)
    zm = z_map(np.array([0.3, -0.2]), P)
    grid = explore_grid(batch_evaluator(f), zm, 0.0)
    centre = np.flatnonzero(np.all(grid.z == 0, axis=1))[0]
    assert grid.logdens[centre] == grid.logdens.max() == 0.0
    assert np.all(-grid.logdens < 2.5)
    assert grid.probabilities().sum() == pytest.approx(1.0)


def test_grid_point_budget():
    f = gaussian_logdens(np.zeros(3), np.eye(3) * 1e-3)
    zm = z_map(np.zeros(3), np.eye(3))
    with pytest.raises(PointBudgetExceeded):
        explore_grid(batch_evaluator(f), zm, 0.0, budget=200)


def test_grid_independent_of_workers():
    P = np.array([[2.0, 0.6], [0.6, 1.0]])
    f = gaussian_logdens([0.0, 0.0], P)
    zm = z_map(np.zeros(2), P)
    a = explore_grid(batch_evaluator(f, 1), zm, 0.0)
    b = explore_grid(batch_evaluator(f, 3), zm, 0.0)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.logdens, b.logdens)


def test_indefinite_hessian_warns_and_floors():
    with pytest.warns(IndefiniteHessian):
        zm = z_map(np.zeros(2), np.array([[1.0, 0.0], [0.0, -0.5]]))
    assert np.all(np.isfinite(zm.lam)) and np.all(zm.lam > 0)


def test_ccd_two_dimensions_has_nine_points():
    Z, w = ccd_points(2)
    assert Z.shape == (9, 2)
    np.testing.assert_array_equal(Z[0], 0.0)


@pytest.mark.parametrize("m", [2, 3, 4, 5, 6])
def test_ccd_reproduces_standard_normal_moments(m):
    Z, w = ccd_points(m)
    assert np.all(w > 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(w @ Z, 0.0, atol=1e-14)
    np.testing.assert_allclose((Z * w[:, None]).T @ Z, np.eye(m), atol=1e-10)
    radius = np.linalg.norm(Z[1:], axis=1)
    np.testing.assert_allclose(radius, 1.1 * math.sqrt(m))


def test_ccd_design_weights_gaussian_mass():
    P = np.array([[2.0, 0.6], [0.6, 1.0]])
    f = gaussian_logdens([0.0, 0.0], P)
    zm = z_map(np.zeros(2), P)
    g = ccd_design(batch_evaluator(f), zm, 0.0)
    # on a Gaussian target the mixture weights are the probability weights
    np.testing.assert_allclose(g.probabilities(), ccd_points(2)[1], atol=1e-12)


def test_grid_and_ccd_agree_on_ar1_replicates():
    spec, _ = ar1_replicates()
    means = {}
    for s in ("grid", "ccd"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IndefiniteHessian)
            res = fit(spec, RunConfig(strategy="gaussian", int_strategy=s))
        means[s] = res.grid.probabilities() @ res.grid.theta
    np.testing.assert_allclose(means["grid"], means["ccd"], atol=0.05)
