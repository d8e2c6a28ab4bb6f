#!/usr/bin/env python3
"""
Tests for the data-generating process: laws, sampling and the dataset CSV.
"""

import math
import os
import sys
import tempfile

import numpy as np
from scipy import stats

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from coxlasso.dgp import (
    BaselineHazard, CensoringLaw, CovariateLaw, Dataset, Dgp,
    at_risk_probability, load_csv, sample_dataset, save_csv,
)
from coxlasso.errors import DataFormatError
from coxlasso.population import PopulationContext, event_probability
from builders import SLOW, correlated_dgp, sign_cube_dgp, single_atom_dgp


# ---------------------------------------------------------------------------
# Laws
# ---------------------------------------------------------------------------

def test_covariate_law_validation():
    law = CovariateLaw(np.array([[0.0], [1.0]]), np.array([0.25, 0.75]))
    assert law.m == 1 and law.size == 2

    for atoms, probs in [
        ([[0.0], [1.0]], [0.5, 0.6]),   # does not sum to 1
        ([[0.0], [1.0]], [1.0, 0.0]),   # zero probability
        ([[1.0], [1.0]], [0.5, 0.5]),   # duplicate atoms
        ([[0.0], [1.0]], [1.0]),        # length mismatch
    ]:
        try:
            CovariateLaw(np.array(atoms), np.array(probs))
            assert False, f"Should have rejected atoms={atoms}, probs={probs}"
        except ValueError:
            pass


def test_sign_cube_law():
    law = CovariateLaw.rademacher(3)
    assert law.size == 8
    assert np.allclose(law.probs, 1.0 / 8)
    assert set(np.unique(law.atoms)) == {-1.0, 1.0}
    try:
        CovariateLaw.rademacher(13)
        assert False, "Should have raised ValueError"
    except ValueError:
        pass


def test_random_atoms_are_reproducible():
    a = CovariateLaw.random_atoms(4, 10, seed=3)
    b = CovariateLaw.random_atoms(4, 10, seed=3)
    assert np.array_equal(a.atoms, b.atoms)
    try:
        CovariateLaw.random_atoms(2, 5, seed=0, kind="sign")
        assert False, "Only 4 sign atoms exist for m=2"
    except ValueError:
        pass


def test_basis_table_replaces_atoms():
    law = CovariateLaw(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]),
                       basis_table=np.array([[1.0, 0.0], [1.0, 1.0]]))
    assert law.m == 2
    assert np.array_equal(law.psi, [[1.0, 0.0], [1.0, 1.0]])


def test_piecewise_hazard():
    hazard = BaselineHazard(np.array([0.0, 0.5]), np.array([1.0, 2.0]))
    assert math.isclose(hazard.cumulative(0.25), 0.25)
    assert math.isclose(hazard.cumulative(1.0), 1.5)
    assert math.isclose(hazard.inverse_cumulative(1.5), 1.0)
    assert hazard.rate(0.5) == 2.0
    assert hazard.pieces(1.0) == [(0.0, 0.5, 1.0), (0.5, 1.0, 2.0)]
    assert hazard.pieces(0.3) == [(0.0, 0.3, 1.0)]

    for breakpoints, rates in [([0.0, 0.5], [1.0, 0.0]), ([0.0, 0.5, 0.5], [1.0, 1.0, 1.0]),
                               ([0.1], [1.0])]:
        try:
            BaselineHazard(np.array(breakpoints), np.array(rates))
            assert False, f"Should have rejected {breakpoints}, {rates}"
        except ValueError:
            pass


def test_censoring_law_needs_atom_at_tau():
    for upper, tau in [(1.0, 1.0), (0.5, 1.0), (math.inf, math.inf), (2.0, 0.0)]:
        try:
            CensoringLaw(upper, tau)
            assert False, f"Should have rejected upper={upper}, tau={tau}"
        except ValueError:
            pass


def test_dgp_pi_closed_form():
    dgp = single_atom_dgp(rate=1.0, upper=2.0, tau=1.0)
    assert math.isclose(dgp.pi(), math.exp(-1.0) * 0.5, rel_tol=1e-14)


def test_dgp_rejects_wrong_theta_length():
    law = CovariateLaw.rademacher(2)
    try:
        Dgp(law, BaselineHazard.constant(1.0), CensoringLaw(2.0, 1.0), np.zeros(3))
        assert False, "Should have raised ValueError"
    except ValueError:
        pass


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def test_sample_is_deterministic():
    dgp = sign_cube_dgp()
    a = sample_dataset(dgp, 5, 7)
    b = sample_dataset(dgp, 5, 7)
    c = sample_dataset(dgp, 5, 8)
    assert a.equals(b)
    assert not a.equals(c)
    assert sample_dataset(dgp, 5, 7, 1).equals(sample_dataset(dgp, 5, 7, 1))
    assert not sample_dataset(dgp, 5, 7, 1).equals(sample_dataset(dgp, 5, 7, 2))


def test_sample_respects_support():
    dgp = correlated_dgp()
    data = sample_dataset(dgp, 500, 11)
    assert data.n == 500 and data.m == dgp.m
    assert np.all(data.y >= 0) and np.all(data.y <= dgp.tau)
    assert set(np.unique(data.delta)) <= {0, 1}
    atoms = {tuple(row) for row in dgp.covariates.psi}
    assert all(tuple(row) in atoms for row in data.x)
    # censored observations at tau carry delta = 0
    assert np.all(data.delta[data.y == dgp.tau] == 0)


def test_sample_rejects_empty():
    try:
        sample_dataset(sign_cube_dgp(), 0, 1)
        assert False, "Should have raised ValueError"
    except ValueError:
        pass


def test_event_frequency_matches_quadrature():
    dgp = single_atom_dgp(rate=1.0, upper=2.0, tau=1.0)
    n = 1_000_000 if SLOW else 100_000
    data = sample_dataset(dgp, n, 2024)
    p = event_probability(PopulationContext(dgp))
    se = math.sqrt(p * (1 - p) / n)
    freq = data.n_events / n
    assert abs(freq - p) <= 4 * se, f"event frequency {freq} vs {p} (SE {se})"


def test_event_times_follow_the_cox_law():
    # censoring far beyond every event time: Lambda0(T) exp(f(X)) ~ Exp(1)
    dgp = sign_cube_dgp(upper=1e6, tau=50.0)
    data = sample_dataset(dgp, 4000, 17)
    ev = data.delta == 1
    assert ev.mean() > 0.99
    scaled = dgp.hazard.cumulative(data.y[ev]) * np.exp(data.x[ev] @ dgp.theta_true)
    result = stats.kstest(scaled, "expon")
    assert result.pvalue > 1e-3, result


def test_fraction_at_tau_matches_pi():
    dgp = sign_cube_dgp()
    n = 200_000 if SLOW else 40_000
    data = sample_dataset(dgp, n, 99)
    p = dgp.pi()
    se = math.sqrt(p * (1 - p) / n)
    freq = np.mean(data.y >= dgp.tau)
    assert abs(freq - p) <= 4 * se, f"fraction at tau {freq} vs pi {p} (SE {se})"


def test_at_risk_probability():
    dgp = single_atom_dgp(rate=1.0, upper=2.0, tau=1.0)
    assert at_risk_probability(dgp, [1.0], 0.0) == 1.0
    assert math.isclose(at_risk_probability(dgp, [1.0], 0.5), math.exp(-0.5) * 0.75)
    assert math.isclose(at_risk_probability(dgp, [1.0], 1.0), dgp.pi())
    for t in (-0.1, 1.5):
        try:
            at_risk_probability(dgp, [1.0], t)
            assert False, f"Should have rejected t={t}"
        except ValueError:
            pass


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def test_sort_index_breaks_ties_by_position():
    data = Dataset(np.array([1.0, 0.5, 1.0]), np.array([1, 1, 0]), np.array([[0.0], [1.0], [2.0]]))
    assert data.sort_index.tolist() == [1, 0, 2]
    assert np.all(np.diff(data.y[data.sort_index]) >= 0)


def test_canonical_order_ignores_row_order():
    data = sample_dataset(correlated_dgp(), 40, 3)
    shuffled = data.permuted(np.random.default_rng(0).permutation(40))
    a = data.x[data.canonical_index]
    b = shuffled.x[shuffled.canonical_index]
    assert np.array_equal(a, b)
    assert np.array_equal(data.y[data.canonical_index], shuffled.y[shuffled.canonical_index])


def test_dataset_validation():
    for y, delta, x in [
        ([], [], np.zeros((0, 1))),
        ([1.0], [2], [[0.0]]),
        ([-1.0], [1], [[0.0]]),
        ([1.0, 2.0], [1], [[0.0], [1.0]]),
        ([math.nan], [1], [[0.0]]),
    ]:
        try:
            Dataset(np.array(y), np.array(delta), np.array(x))
            assert False, f"Should have rejected y={y}"
        except ValueError:
            pass


def test_csv_round_trip():
    data = sample_dataset(correlated_dgp(), 25, 9)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "data.csv")
        save_csv(data, path)
        with open(path) as f:
            assert f.readline().strip() == "y,delta,x1,x2,x3"
        again = load_csv(path)
    assert again.equals(data)


def test_csv_errors_name_the_line():
    cases = [
        ("t,delta,x1\n1.0,1,0.5\n", 1),
        ("y,delta,x1\n1.0,1,0.5\n0.5,2,0.1\n", 3),
        ("y,delta,x1\n1.0,1\n", 2),
        ("y,delta,x1\n1.0,1,abc\n", 2),
        ("y,delta,x1\n", 2),
    ]
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "bad.csv")
        for text, line in cases:
            with open(path, "w") as f:
                f.write(text)
            try:
                load_csv(path)
                assert False, f"Should have rejected {text!r}"
            except DataFormatError as e:
                assert e.line == line, f"{text!r}: line {e.line}, expected {line}"
                assert f"line {line}" in str(e)


def test_missing_csv_is_os_error():
    try:
        load_csv("/nonexistent/path/data.csv")
        assert False, "Should have raised OSError"
    except OSError:
        pass


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"  ✓ {name}")
    print("All dgp tests passed!")
