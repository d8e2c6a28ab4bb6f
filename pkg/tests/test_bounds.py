#!/usr/bin/env python3
"""
Tests for the bound constants, the margin pair and the oracle quantities.
"""

import math
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from coxlasso.bounds import (
    BoundConfig, Delta, QuadraticMargin, a_n, bound_constants, bound_report,
    compatibility_D, d_b, d_delta, estimate_margin_constant, margin_pair,
    oracle_quantities, project_feasible, repetition_probability, resolve_l1_radius,
    tail_bounds, theorem_probability, w_sensitivity, weighted_norms,
)
from coxlasso.errors import ConfigError
from coxlasso.population import PopulationContext, l2_distance, sigma
from builders import correlated_dgp, sign_cube_dgp


def _quick(**kwargs) -> BoundConfig:
    base = dict(C0=4.0, condition2_starts=2, condition2_iterations=5)
    base.update(kwargs)
    return BoundConfig(**base)


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------

def test_a_n_hand_value_and_monotonicity():
    assert abs(a_n(1.0, 4, 400) - 0.10717) < 1e-5
    values = [a_n(1.0, 4, n) for n in (100, 400, 1600, 6400)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert a_n(2.0, 4, 400) > a_n(1.0, 4, 400)


def test_lambda_identities():
    c = bound_constants(sign_cube_dgp(), 400, BoundConfig())
    assert c.K_m == 1.0
    assert math.isclose(c.abar_n, 4.0 * c.a_n)
    assert math.isclose(c.lam0, c.lamA + c.lamB)
    assert math.isclose(c.lam_n, 2.0 * c.lam0)
    assert math.isclose(c.U_m, math.exp(c.K_m * c.L_m * c.sigma_max))
    assert c.lamA > c.abar_n


def test_delta_constants():
    cfg = BoundConfig(b=1.0, d=2.0, delta=0.5, N1=1, N2=0)
    assert d_b(cfg) == 6.0
    assert math.isclose(d_delta(cfg), 6.0)
    assert math.isclose(Delta(cfg), 9.0)


def test_delta1_must_be_a_power_of_the_base():
    assert BoundConfig(b=1.0, delta1=0.25).N1 == 2
    for kwargs in ({"N1": 0}, {"b": 1.0, "delta1": 0.3}, {"b": 1.0, "N1": 3, "delta1": 0.25},
                   {"d": 1.0}, {"delta": 1.0}, {"W": 0.0}, {"C0": -1.0}):
        try:
            BoundConfig(**kwargs)
            assert False, f"Should have rejected {kwargs}"
        except ConfigError:
            pass


def test_theorem_probability_formula():
    cfg = BoundConfig(b=1.0, d=2.0, delta=0.5, N1=1, N2=0)
    c = bound_constants(sign_cube_dgp(), 400, cfg)
    prob = theorem_probability(cfg, c, 400)
    per_round = 1.3 * math.exp(-400 * c.abar_n ** 2) + 2.0 * math.exp(-400 * c.pi ** 2 / 2.0)
    assert math.isclose(prob.raw, 1.0 - math.log2(72.0) * per_round, rel_tol=1e-12)
    assert prob.clipped == min(max(prob.raw, 0.0), 1.0)
    assert prob.vacuous == (prob.raw <= 0.0)
    try:
        theorem_probability(cfg, c, 401)
        assert False, "Should have rejected mismatched n"
    except ValueError:
        pass


def test_repetition_probability_and_tails():
    cfg = BoundConfig()
    c = bound_constants(sign_cube_dgp(), 200, cfg)
    assert repetition_probability(cfg, c, 0) == 1.0
    assert repetition_probability(cfg, c, 2) < repetition_probability(cfg, c, 1)
    tails = tail_bounds(c, 1.0)
    assert math.isclose(tails["sup_deviation"], 2.0 * tails["sup_deviation_basis"])
    assert math.isclose(tails["r_tail"], tails["at_risk"] + 0.3 * tails["z_tail"])

    table = w_sensitivity(cfg, c)
    assert set(table) == {"W=1", "W=10", "W=100"}
    assert table["W=100"]["sup_deviation"] > table["W=1"]["sup_deviation"]


def test_weighted_norms():
    total, on, off = weighted_norms([1.0, -2.0, 3.0], [0.5, 0.0, 0.0], [1.0, 2.0, 0.5])
    assert (total, on, off) == (6.5, 1.0, 5.5)
    try:
        weighted_norms([1.0], [1.0, 2.0], [1.0, 1.0])
        assert False, "Should have raised ValueError"
    except ValueError:
        pass


def test_margin_pair_satisfies_fenchel_young():
    margin = QuadraticMargin(3.0)
    for u in np.linspace(0.0, 2.0, 21):
        for v in np.linspace(0.0, 2.0, 21):
            assert margin.G(u) + margin.H(v) >= u * v - 1e-14
    G, H = margin_pair(BoundConfig(C0=3.0))
    assert G(1.0) == margin.G(1.0) and H(1.0) == margin.H(1.0)
    try:
        margin_pair(BoundConfig())
        assert False, "C0 unset should raise"
    except ValueError:
        pass


def test_l1_radius_resolution():
    dgp = sign_cube_dgp()
    assert resolve_l1_radius(dgp, BoundConfig()) == 1.0
    assert resolve_l1_radius(dgp, BoundConfig(l1_radius=3.0)) == 3.0
    assert resolve_l1_radius(sign_cube_dgp(theta=(0.0, 0.0)), BoundConfig()) == 1.0
    try:
        resolve_l1_radius(dgp, BoundConfig(l1_radius=0.5))
        assert False, "radius below ||theta_bar||_1 should raise"
    except ConfigError:
        pass


# ---------------------------------------------------------------------------
# Compatibility and margin
# ---------------------------------------------------------------------------

def test_compatibility_orthonormal_basis():
    dgp = sign_cube_dgp()
    assert compatibility_D(dgp, []) == 0.0
    for K in ([0], [0, 1], [1, 2, 3]):
        assert math.isclose(compatibility_D(dgp, K), len(K), rel_tol=1e-12)
    try:
        compatibility_D(dgp, [4])
        assert False, "index out of range should raise"
    except ValueError:
        pass


def test_compatibility_certificate_on_correlated_basis():
    dgp = correlated_dgp()
    ctx = PopulationContext(dgp)
    s = sigma(ctx)
    rng = np.random.default_rng(9)
    for K in ([0], [0, 2]):
        D = compatibility_D(dgp, K)
        assert math.isfinite(D) and D >= len(K)
        for _ in range(50):
            diff = rng.normal(size=dgp.m)
            lhs = float(np.sum(s[K] * np.abs(diff[K])))
            rhs = math.sqrt(D) * l2_distance(ctx, diff, np.zeros(dgp.m))
            assert lhs <= rhs * (1 + 1e-10)


def test_estimated_margin_constant_covers_samples():
    ctx = PopulationContext(sign_cube_dgp())
    C0, details = estimate_margin_constant(ctx, eta=0.5, samples=20, seed=1, threads=2)
    assert C0 > 0
    assert 1 <= details["used"] <= 20
    assert details["ratio_median"] <= C0
    assert details["C0"] == C0


def test_project_feasible_lands_in_both_sets():
    center = np.array([0.5, -0.5, 0.0])
    weights = np.array([1.0, 2.0, 0.5])
    rng = np.random.default_rng(4)
    for _ in range(10):
        v = rng.normal(scale=3.0, size=3)
        x = project_feasible(v, center, weights, rho=0.4, radius=1.2)
        assert np.sum(weights * np.abs(x - center)) <= 0.4 + 1e-6
        assert np.sum(np.abs(x)) <= 1.2 + 1e-8


# ---------------------------------------------------------------------------
# Oracle quantities
# ---------------------------------------------------------------------------

def test_oracle_quantities_invariants():
    dgp = sign_cube_dgp()
    ctx = PopulationContext(dgp)
    cfg = _quick()
    c = bound_constants(dgp, 400, cfg)
    oq = oracle_quantities(ctx, cfg, c, seed=3, threads=2)

    assert oq.supports_searched == 1 + 4 + 6
    assert len(oq.support) <= cfg.s_max
    off = [k for k in range(dgp.m) if k not in oq.support]
    assert np.all(oq.theta_star[off] == 0.0)
    assert math.isclose(oq.eps_star, (1 + cfg.delta) * oq.excess_star + oq.V_star, rel_tol=1e-12)
    assert math.isclose(oq.zeta_star, oq.eps_star / c.lam0, rel_tol=1e-12)
    assert oq.cond1_ok == (oq.cond1_distance <= cfg.eta)
    assert oq.certified == (oq.cond1_ok and oq.cond2_ok)

    s = np.asarray(c.sigma)
    rho = c.d_b * oq.zeta_star / cfg.b
    assert np.sum(s * np.abs(oq.theta_eps - oq.theta_star)) <= rho * (1 + 1e-6) + 1e-10
    assert np.sum(np.abs(oq.theta_eps)) <= c.L_m + 1e-8

    try:
        oracle_quantities(ctx, BoundConfig(), c)
        assert False, "C0 unset should raise"
    except ValueError:
        pass
    try:
        oracle_quantities(ctx, cfg, c, s_max=5)
        assert False, "s_max > m should raise"
    except ValueError:
        pass


def test_bound_report_layout():
    ctx = PopulationContext(sign_cube_dgp())
    report = bound_report(ctx, _quick(), 400, seed=0, threads=2)
    for key in ("n", "bound_config", "constants", "margin", "oracle", "d_b", "d_delta", "Delta",
                "theorem_probability", "basic_inequality_probability", "path_bound_probability",
                "tail_bounds", "w_sensitivity"):
        assert key in report, key
    assert report["margin"]["source"] == "config"
    assert report["d_b"] == 6.0


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"  ✓ {name}")
    print("All bounds tests passed!")
