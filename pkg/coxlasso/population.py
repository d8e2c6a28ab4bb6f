"""
Exact population functionals under a known DGP.

With a finite-support covariate law every expectation over X is a weighted
sum over atoms, and the only integral left is over event times. That
integral is taken per hazard segment (the integrand is smooth on each) by
scipy's vector-valued adaptive quadrature, so the loss, its gradient and its
Hessian share the same subdivision.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Tuple

import numpy as np
from scipy import integrate

from coxlasso.dgp import Dgp, sample_dataset
from coxlasso.errors import QuadratureError
from shared.utils import setup_logging


logger = setup_logging(__name__)


@dataclass(frozen=True)
class QuadratureOptions:
    """Tolerance settings for the event-time integrals."""
    rel_tol: float = 1e-10
    abs_tol: float = 1e-14
    max_subdivisions: int = 1000  # per hazard segment

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ValueError(f"rel_tol must be > 0, got {self.rel_tol}")
        if self.abs_tol < 0:
            raise ValueError(f"abs_tol must be >= 0, got {self.abs_tol}")
        if self.max_subdivisions < 4:
            raise ValueError(f"max_subdivisions must be >= 4, got {self.max_subdivisions}")


@dataclass(frozen=True)
class PopulationContext:
    """The population P plus how its integrals are evaluated."""
    dgp: Dgp
    quadrature: QuadratureOptions = field(default_factory=QuadratureOptions)

    @property
    def psi(self) -> np.ndarray:
        return self.dgp.covariates.psi

    @property
    def probs(self) -> np.ndarray:
        return self.dgp.covariates.probs

    @property
    def m(self) -> int:
        return self.dgp.m

    @property
    def tau(self) -> float:
        return self.dgp.tau

    @cached_property
    def exp_fbar(self) -> np.ndarray:
        return np.exp(self.dgp.true_linear_predictor())

    @cached_property
    def target_loss(self) -> float:
        """l(theta_bar), the minimum of the expected loss."""
        return expected_loss(self, self.dgp.theta_true)


def linear_predictor(ctx: PopulationContext, theta) -> np.ndarray:
    """f_theta at every atom."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (ctx.m,):
        raise ValueError(f"theta must have length {ctx.m}, got shape {theta.shape}")
    return ctx.psi @ theta


def _check_times(ctx: PopulationContext, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > ctx.tau):
        raise ValueError(f"t must lie in [0, tau={ctx.tau}]")
    return t


def _at_risk(ctx: PopulationContext, t) -> np.ndarray:
    """P(Y >= t | X = x_r), shape (R,) + t.shape."""
    t = np.asarray(t, dtype=float)
    cum = ctx.dgp.hazard.cumulative(t)
    s_t = np.exp(-np.multiply.outer(ctx.exp_fbar, cum))
    return s_t * ctx.dgp.censoring.survival(t)


def mu(ctx: PopulationContext, theta, t):
    """
    mu(t; f_theta) = E[1(Y >= t) exp(f_theta(X))].

    Args:
        ctx: Population context
        theta: Coefficients (length m)
        t: Time or array of times in [0, tau]

    Returns:
        float for scalar t, array otherwise
    """
    t = _check_times(ctx, t)
    weights = ctx.probs * np.exp(linear_predictor(ctx, theta))
    out = np.tensordot(weights, _at_risk(ctx, t), axes=1)
    return float(out) if out.ndim == 0 else out


def mu1(ctx: PopulationContext, theta, t) -> np.ndarray:
    """E[1(Y >= t) psi(X) exp(f_theta(X))], shape (m,) + t.shape."""
    t = _check_times(ctx, t)
    weights = ctx.probs * np.exp(linear_predictor(ctx, theta))
    return np.tensordot(ctx.psi.T * weights, _at_risk(ctx, t), axes=1)


def mu1_derivative(ctx: PopulationContext, theta, t) -> np.ndarray:
    """d/dt of mu1 for t in [0, tau), right derivative at hazard breakpoints."""
    t = _check_times(ctx, t)
    weights = ctx.probs * np.exp(linear_predictor(ctx, theta))
    s_t = np.exp(-np.multiply.outer(ctx.exp_fbar, ctx.dgp.hazard.cumulative(t)))
    hazard = np.multiply.outer(ctx.exp_fbar, ctx.dgp.hazard.rate(t))
    d_at_risk = -s_t * (hazard * ctx.dgp.censoring.survival(t) + 1.0 / ctx.dgp.censoring.upper)
    return np.tensordot(ctx.psi.T * weights, d_at_risk, axes=1)


def sigma(ctx: PopulationContext) -> np.ndarray:
    """Theoretical normalization weights sigma_k = (E psi_k^2)^(1/2)."""
    return np.sqrt(ctx.probs @ ctx.psi ** 2)


def gram(ctx: PopulationContext) -> np.ndarray:
    """sigma-normalized Gram matrix E[psi_j psi_k] / (sigma_j sigma_k)."""
    s = sigma(ctx)
    if np.any(s == 0):
        raise ValueError("Gram matrix undefined: some sigma_k = 0")
    g = (ctx.psi.T * ctx.probs) @ ctx.psi
    return g / np.outer(s, s)


def sup_distance(ctx: PopulationContext, theta, other) -> float:
    """||f_theta - f_other||_inf over the atoms."""
    diff = np.asarray(theta, dtype=float) - np.asarray(other, dtype=float)
    return float(np.max(np.abs(linear_predictor(ctx, diff))))


def l2_distance(ctx: PopulationContext, theta, other) -> float:
    """||f_theta - f_other|| in L2(P_X)."""
    diff = np.asarray(theta, dtype=float) - np.asarray(other, dtype=float)
    return math.sqrt(float(ctx.probs @ linear_predictor(ctx, diff) ** 2))


def pi(ctx: PopulationContext) -> float:
    return ctx.dgp.pi()


def _integrate(ctx: PopulationContext, integrand, what: str) -> np.ndarray:
    """Sum of quad_vec integrals of `integrand` over the hazard segments of [0, tau]."""
    opts = ctx.quadrature
    total = None
    for start, end, _ in ctx.dgp.hazard.pieces(ctx.tau):
        value, _, info = integrate.quad_vec(
            integrand, start, end,
            epsabs=opts.abs_tol, epsrel=opts.rel_tol,
            limit=opts.max_subdivisions, full_output=True,
        )
        if not info.success:
            raise QuadratureError(
                f"{what}: quadrature on [{start}, {end}] failed ({info.message}), "
                f"{info.intervals.shape[0]} intervals"
            )
        total = value if total is None else total + value
    return np.atleast_1d(total)


def _event_terms(ctx: PopulationContext, theta, order: int):
    """
    Build the integrand over event times for the loss and its derivatives.

    At time t the event density of atom r is lambda_0(t) e^{f_bar(x_r)} P(Y >= t | x_r).
    The packed output is [loss] (+ gradient) (+ flattened Hessian).
    """
    f = linear_predictor(ctx, theta)
    f_max = float(np.max(f))
    w_shift = ctx.probs * np.exp(f - f_max)
    psi = ctx.psi
    m = ctx.m
    probs = ctx.probs
    exp_fbar = ctx.exp_fbar
    hazard = ctx.dgp.hazard

    def integrand(t):
        a = _at_risk(ctx, t)
        density = probs * float(hazard.rate(t)) * exp_fbar * a
        g = density.sum()
        w = w_shift * a
        s0 = w.sum()
        log_mu = f_max + math.log(s0)
        parts = [np.array([-(density @ f - g * log_mu)])]
        if order >= 1:
            mbar = (w @ psi) / s0
            parts.append(-(density @ psi - g * mbar))
            if order >= 2:
                cov = (psi.T * w) @ psi / s0 - np.outer(mbar, mbar)
                parts.append((g * cov).ravel())
        return np.concatenate(parts)

    size = 1 + (m if order >= 1 else 0) + (m * m if order >= 2 else 0)
    return integrand, size


def expected_loss(ctx: PopulationContext, theta) -> float:
    """
    l(theta) = -E[{f_theta(X) - log mu(Y; f_theta)} Delta].

    Raises:
        QuadratureError: a segment did not reach the requested tolerance
    """
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    integrand, _ = _event_terms(ctx, theta, order=0)
    return float(_integrate(ctx, integrand, "expected_loss")[0])


def loss_gradient_hessian(ctx: PopulationContext, theta, order: int = 2) -> Tuple:
    """
    Expected loss with its gradient (order >= 1) and Hessian (order 2) in one pass.

    Gradient: -E[Delta {psi(X) - mu1(Y)/mu(Y)}].
    Hessian: E[Delta {mu2/mu - mu1 mu1^T / mu^2}(Y)].
    """
    theta = np.asarray(theta, dtype=float)
    integrand, _ = _event_terms(ctx, theta, order=order)
    packed = _integrate(ctx, integrand, "loss derivatives")
    m = ctx.m
    loss = float(packed[0])
    if order == 0:
        return (loss,)
    grad = packed[1:1 + m]
    if order == 1:
        return loss, grad
    hess = packed[1 + m:].reshape(m, m)
    return loss, grad, 0.5 * (hess + hess.T)


def population_gradient(ctx: PopulationContext, theta) -> np.ndarray:
    return loss_gradient_hessian(ctx, theta, order=1)[1]


def population_hessian(ctx: PopulationContext, theta) -> np.ndarray:
    return loss_gradient_hessian(ctx, theta, order=2)[2]


def event_probability(ctx: PopulationContext) -> float:
    """P(Delta = 1) = P(T <= C)."""
    probs = ctx.probs
    exp_fbar = ctx.exp_fbar
    hazard = ctx.dgp.hazard

    def integrand(t):
        return np.array([float(hazard.rate(t)) * (probs * exp_fbar) @ _at_risk(ctx, t)])

    return float(_integrate(ctx, integrand, "event_probability")[0])


def excess_risk(ctx: PopulationContext, theta) -> float:
    """
    E(f_theta) = l(theta) - l(theta_bar), clamped at 0 within quadrature tolerance.
    """
    raw = expected_loss(ctx, theta) - ctx.target_loss
    if raw >= 0:
        return raw
    tol = 10.0 * ctx.quadrature.rel_tol * max(1.0, abs(ctx.target_loss))
    if raw < -tol:
        logger.warning(f"Excess risk {raw:.3e} below -{tol:.1e}; clamped to 0")
    return 0.0


def f_ratio(ctx: PopulationContext, theta, k: int, t) -> float:
    """
    E[1(Y >= t) psi_k(X) e^{f_theta(X)}] / (mu(t; f_theta) sigma_k).

    Bounded by K_m in absolute value.

    Args:
        k: zero-based basis index
    """
    if not 0 <= k < ctx.m:
        raise ValueError(f"k must be in [0, {ctx.m}), got {k}")
    denom = mu(ctx, theta, t)
    if np.any(np.asarray(denom) <= 0):
        raise ValueError(f"mu(t) vanished at t={t}")
    out = mu1(ctx, theta, t)[k] / (np.asarray(denom) * sigma(ctx)[k])
    return float(out) if np.ndim(out) == 0 else out


def mc_oracle_expected_loss(ctx: PopulationContext, theta, N: int, seed: int,
                            *stream: int, chunk: int = 100_000) -> Tuple[float, float]:
    """
    Monte-Carlo estimate of l(theta) from N fresh draws.

    Returns:
        (mean of gamma_f over the draws, sample SD / sqrt(N))
    """
    if N < 1000:
        raise ValueError(f"Monte-Carlo oracle needs N >= 1000, got {N}")
    data = sample_dataset(ctx.dgp, N, seed, *stream)
    theta = np.asarray(theta, dtype=float)
    f = data.x @ theta
    gamma = np.zeros(N)
    events = np.flatnonzero(data.delta == 1)
    for lo in range(0, events.size, chunk):
        idx = events[lo:lo + chunk]
        gamma[idx] = -(f[idx] - np.log(mu(ctx, theta, data.y[idx])))
    estimate = float(gamma.mean())
    se = float(gamma.std(ddof=1) / math.sqrt(N))
    logger.debug(f"MC oracle: N={N}, estimate={estimate:.6f}, se={se:.2e}")
    return estimate, se
