#!/usr/bin/env python3
"""
Tests for the empirical partial likelihood and its derivatives.
"""

import math
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from coxlasso.dgp import Dataset, sample_dataset
from coxlasso.emploss import (
    empirical_sigma, intermediate_loss, loss_and_gradient, partial_likelihood,
    partial_likelihood_gradient, partial_likelihood_hessian, suffix_sums,
)
from coxlasso.population import PopulationContext, mu
from builders import correlated_dgp, sign_cube_dgp, single_atom_dgp


def test_breslow_ties():
    # both rows share y = 1, so each risk set holds both
    data = Dataset(np.array([1.0, 1.0]), np.array([1, 1]), np.array([[1.0], [0.0]]))
    expected = math.log((1.0 + math.e) / 2.0) - 0.5
    assert math.isclose(partial_likelihood(data, [1.0]), expected, rel_tol=1e-14)


def test_no_events_gives_zero():
    data = Dataset(np.array([0.3, 1.0]), np.array([0, 0]), np.array([[1.0], [-1.0]]))
    assert partial_likelihood(data, [0.7]) == 0.0
    assert np.array_equal(partial_likelihood_gradient(data, [0.7]), [0.0])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    for instance in range(10):
        data = sample_dataset(correlated_dgp(), 60, 100 + instance)
        theta = rng.normal(scale=0.5, size=data.m)
        grad = partial_likelihood_gradient(data, theta)
        h = 1e-6
        for k in range(data.m):
            step = np.zeros(data.m)
            step[k] = h
            fd = (partial_likelihood(data, theta + step) - partial_likelihood(data, theta - step)) / (2 * h)
            assert abs(fd - grad[k]) <= 1e-6 * max(1.0, abs(grad[k])), \
                f"instance {instance}, k={k}: fd {fd} vs {grad[k]}"


def test_hessian_matches_finite_differences():
    data = sample_dataset(correlated_dgp(), 80, 4)
    theta = np.array([0.3, -0.1, 0.2])
    hess = partial_likelihood_hessian(data, theta)
    assert np.allclose(hess, hess.T)
    assert np.min(np.linalg.eigvalsh(hess)) > -1e-12
    h = 1e-6
    for k in range(data.m):
        step = np.zeros(data.m)
        step[k] = h
        fd = (partial_likelihood_gradient(data, theta + step)
              - partial_likelihood_gradient(data, theta - step)) / (2 * h)
        assert np.allclose(fd, hess[k], atol=1e-6)


def test_loss_and_gradient_single_pass():
    data = sample_dataset(sign_cube_dgp(), 50, 8)
    theta = np.array([0.2, -0.3, 0.0, 0.1])
    loss, grad = loss_and_gradient(data, theta)
    assert math.isclose(loss, partial_likelihood(data, theta), rel_tol=1e-14)
    assert np.allclose(grad, partial_likelihood_gradient(data, theta), rtol=1e-14, atol=0)


def test_row_order_cannot_change_a_bit():
    data = sample_dataset(correlated_dgp(), 200, 21)
    theta = np.array([0.5, -0.25, 0.125])
    rng = np.random.default_rng(3)
    base_loss = partial_likelihood(data, theta)
    base_grad = partial_likelihood_gradient(data, theta)
    for _ in range(5):
        shuffled = data.permuted(rng.permutation(data.n))
        assert partial_likelihood(shuffled, theta) == base_loss
        assert np.array_equal(partial_likelihood_gradient(shuffled, theta), base_grad)


def test_predictor_bound_is_enforced():
    data = sample_dataset(sign_cube_dgp(), 20, 1)
    try:
        partial_likelihood(data, [2.0, 0.0, 0.0, 0.0], max_abs_predictor=1.0)
        assert False, "Should have rejected |f| above the bound"
    except ValueError:
        pass
    try:
        partial_likelihood(data, [0.0, 0.0])
        assert False, "Should have rejected wrong theta length"
    except ValueError:
        pass
    try:
        loss_and_gradient(data, [0.6, 0.6, 0.0, 0.0], max_abs_predictor=1.0)
        assert False, "Should have rejected |f| = 1.2 above the bound"
    except ValueError as e:
        assert "log U_m" in str(e)
    loss_and_gradient(data, [0.5, 0.5, 0.0, 0.0], max_abs_predictor=1.0)


def test_suffix_sums_are_compensated():
    # plain running sums drop every 1.0 added onto 2^53
    values = np.array([1.0] * 10 + [2.0 ** 53])
    sums = suffix_sums(values)
    for i in range(values.size):
        assert sums[i] == math.fsum(values[i:]), (i, sums[i], math.fsum(values[i:]))

    rng = np.random.default_rng(4)
    mixed = np.exp(rng.uniform(-30.0, 30.0, size=400))
    mixed[::7] = np.exp(30.0)
    sums = suffix_sums(np.column_stack([mixed, -mixed[::-1]]))
    for i in range(0, mixed.size, 13):
        for col, column in enumerate((mixed, -mixed[::-1])):
            exact = math.fsum(column[i:])
            assert abs(sums[i, col] - exact) <= np.spacing(abs(exact)), (i, col)


def test_loss_is_convex_along_segments():
    data = sample_dataset(correlated_dgp(), 150, 12)
    rng = np.random.default_rng(9)
    for _ in range(10):
        a = rng.normal(scale=1.5, size=data.m)
        b = rng.normal(scale=1.5, size=data.m)
        la, lb = partial_likelihood(data, a), partial_likelihood(data, b)
        for t in np.linspace(0.0, 1.0, 11):
            mid = partial_likelihood(data, (1.0 - t) * a + t * b)
            assert mid <= (1.0 - t) * la + t * lb + 1e-12 * (1.0 + abs(la) + abs(lb))


def test_intermediate_loss_closed_form():
    dgp = single_atom_dgp()
    ctx = PopulationContext(dgp)
    data = sample_dataset(dgp, 40, 6)
    theta = np.array([0.4])
    ev = data.delta == 1
    expected = -np.sum(0.4 - np.log(mu(ctx, theta, data.y[ev]))) / data.n
    assert math.isclose(intermediate_loss(data, ctx, theta), expected, rel_tol=1e-12)

    empty = Dataset(np.array([1.0]), np.array([0]), np.array([[1.0]]))
    assert intermediate_loss(empty, ctx, theta) == 0.0


def test_empirical_sigma():
    data = Dataset(np.array([0.1, 0.2]), np.array([1, 0]), np.array([[3.0, 0.0], [4.0, 0.0]]))
    sigma = empirical_sigma(data)
    assert math.isclose(sigma[0], math.sqrt(12.5))
    assert sigma[1] == 0.0


def test_rescaling_a_column_rescales_its_weight():
    data = sample_dataset(correlated_dgp(), 30, 2)
    scaled = data.rescaled(1, 4.0)
    assert math.isclose(empirical_sigma(scaled)[1], 4.0 * empirical_sigma(data)[1], rel_tol=1e-14)
    theta = np.array([0.1, 0.2, -0.3])
    theta_scaled = theta.copy()
    theta_scaled[1] /= 4.0
    assert math.isclose(partial_likelihood(scaled, theta_scaled), partial_likelihood(data, theta),
                        rel_tol=1e-12)


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"  ✓ {name}")
    print("All emploss tests passed!")
