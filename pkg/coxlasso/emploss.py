"""
Empirical losses: the negative log partial likelihood l_n, its derivatives,
the iid intermediate loss, and the empirical penalty weights.

All sums run over the dataset's canonical row order (y, then delta, then the
covariate row), so shuffling the rows of a dataset cannot change a single
bit of any value computed here. Risk-set sums are compensated suffix sums
over that order, read off at the first row of each tied-y group so that
1(Y_j >= Y_i) includes every tie (Breslow).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from coxlasso.dgp import Dataset
from coxlasso.population import PopulationContext, mu
from shared.utils import setup_logging


logger = setup_logging(__name__)


@dataclass
class RiskSetSums:
    """
    Per-call scratch for risk-set averages, in canonical order.

    Attributes:
        times: y in canonical (ascending) order
        delta: event indicators in the same order
        f: linear predictor f_theta(X_i)
        shift: max f subtracted before exponentiating
        s0: (1/n) sum_j 1(Y_j >= Y_i) e^{f_j - shift}
        s1: (n, m) psi-weighted version of s0, or None
        s2: (n, m, m) psi psi^T-weighted version, or None
        x: covariates in canonical order
    """
    times: np.ndarray
    delta: np.ndarray
    f: np.ndarray
    shift: float
    s0: np.ndarray
    x: np.ndarray
    s1: Optional[np.ndarray] = None
    s2: Optional[np.ndarray] = None

    @property
    def log_s0(self) -> np.ndarray:
        """log of the unshifted average (1/n) sum_j 1(Y_j >= Y_i) e^{f_j}."""
        return self.shift + np.log(self.s0)


def suffix_sums(values: np.ndarray) -> np.ndarray:
    """
    Suffix sums along axis 0 with compensated accumulation.

    The rounding error of every addition in the running sum is recovered
    exactly (two-sum) and added back, so terms many orders of magnitude
    apart (e^{f} over a wide range of f) keep their contribution.
    """
    rev = np.asarray(values, dtype=float)[::-1]
    total = np.cumsum(rev, axis=0)
    error = np.zeros_like(total)
    if rev.shape[0] > 1:
        before, term, after = total[:-1], rev[1:], total[1:]
        virtual = after - before
        error[1:] = (before - (after - virtual)) + (term - virtual)
    return (total + np.cumsum(error, axis=0))[::-1]


def _suffix(values: np.ndarray, first: np.ndarray, n: int) -> np.ndarray:
    """(1/n) times the suffix sum starting at each row's tie-group head."""
    return suffix_sums(values)[first] / n


def risk_set_sums(dataset: Dataset, theta, order: int = 1,
                  max_abs_predictor: Optional[float] = None) -> RiskSetSums:
    """
    Compute S0 (and S1, S2 up to `order`) at every observed time.

    Args:
        dataset: Sample
        theta: Coefficients (length m)
        order: 0, 1 or 2
        max_abs_predictor: if given, reject theta with |f_theta(X_i)| above it (log U_m)
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (dataset.m,):
        raise ValueError(f"theta must have length {dataset.m}, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")

    idx = dataset.canonical_index
    y = dataset.y[idx]
    delta = dataset.delta[idx]
    x = dataset.x[idx]
    n = dataset.n

    f = x @ theta
    if max_abs_predictor is not None and np.max(np.abs(f)) > max_abs_predictor * (1.0 + 1e-12):
        raise ValueError(f"|f_theta| reaches {np.max(np.abs(f)):.6g} > log U_m = {max_abs_predictor:.6g}")
    shift = float(np.max(f))
    w = np.exp(f - shift)
    first = np.searchsorted(y, y, side="left")

    sums = RiskSetSums(times=y, delta=delta, f=f, shift=shift, s0=_suffix(w, first, n), x=x)
    if order >= 1:
        wx = x * w[:, None]
        sums.s1 = _suffix(wx, first, n)
        if order >= 2:
            sums.s2 = _suffix(wx[:, :, None] * x[:, None, :], first, n)
    return sums


def partial_likelihood(dataset: Dataset, theta, max_abs_predictor: Optional[float] = None) -> float:
    """
    l_n(theta) = -(1/n) sum_i Delta_i [f_theta(X_i) - log (1/n) sum_j 1(Y_j >= Y_i) e^{f_theta(X_j)}].

    Zero when no event is observed.
    """
    sums = risk_set_sums(dataset, theta, order=0, max_abs_predictor=max_abs_predictor)
    terms = np.where(sums.delta == 1, sums.f - sums.log_s0, 0.0)
    return float(-np.sum(terms) / dataset.n)


def partial_likelihood_gradient(dataset: Dataset, theta) -> np.ndarray:
    """grad l_n = -(1/n) sum_i Delta_i [psi(X_i) - S1(Y_i)/S0(Y_i)]."""
    sums = risk_set_sums(dataset, theta, order=1)
    ev = sums.delta == 1
    resid = sums.x[ev] - sums.s1[ev] / sums.s0[ev, None]
    return -np.sum(resid, axis=0) / dataset.n


def partial_likelihood_hessian(dataset: Dataset, theta) -> np.ndarray:
    """(1/n) sum_i Delta_i [S2/S0 - (S1/S0)(S1/S0)^T] at Y_i; positive semidefinite."""
    sums = risk_set_sums(dataset, theta, order=2)
    ev = sums.delta == 1
    mean = sums.s1[ev] / sums.s0[ev, None]
    second = sums.s2[ev] / sums.s0[ev, None, None]
    cov = second - mean[:, :, None] * mean[:, None, :]
    hess = np.sum(cov, axis=0) / dataset.n
    return 0.5 * (hess + hess.T)


def loss_and_gradient(dataset: Dataset, theta, max_abs_predictor: Optional[float] = None):
    """l_n and its gradient from a single pass over the risk sets."""
    sums = risk_set_sums(dataset, theta, order=1, max_abs_predictor=max_abs_predictor)
    ev = sums.delta == 1
    loss = -np.sum(sums.f[ev] - sums.log_s0[ev]) / dataset.n
    resid = sums.x[ev] - sums.s1[ev] / sums.s0[ev, None]
    return float(loss), -np.sum(resid, axis=0) / dataset.n


def intermediate_loss(dataset: Dataset, ctx: PopulationContext, theta) -> float:
    """
    l~_n(theta) = -(1/n) sum_i Delta_i [f_theta(X_i) - log mu(Y_i; f_theta)].

    The risk-set average of l_n is replaced by its population value, which
    makes the summands iid. The dataset should come from ctx.dgp.
    """
    theta = np.asarray(theta, dtype=float)
    idx = dataset.canonical_index
    delta = dataset.delta[idx]
    ev = delta == 1
    if not np.any(ev):
        return 0.0
    y = dataset.y[idx][ev]
    f = dataset.x[idx][ev] @ theta
    return float(-np.sum(f - np.log(mu(ctx, theta, y))) / dataset.n)


def empirical_sigma(dataset: Dataset) -> np.ndarray:
    """sigma_hat_k = [(1/n) sum_i psi_k(X_i)^2]^(1/2); warns on zero columns."""
    x = dataset.x[dataset.canonical_index]
    out = np.sqrt(np.sum(x ** 2, axis=0) / dataset.n)
    zero = np.flatnonzero(out == 0)
    if zero.size:
        logger.warning(f"Empirical weights vanish for basis functions {(zero + 1).tolist()} (degenerate penalty)")
    return out
