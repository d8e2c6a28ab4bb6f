"""
Weighted-l1 penalized Cox regression.

fit_lasso minimizes l_n(theta) + lambda * sum_k w_k |theta_k| by accelerated
proximal gradient with backtracking (no global Lipschitz constant exists for
l_n) and function-value restarts, then polishes on the active set with
Newton steps once the support settles. Convergence is declared on the KKT
residual. fit_mle is the unpenalized Newton reference.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from coxlasso.dgp import Dataset
from coxlasso.emploss import (
    empirical_sigma,
    loss_and_gradient,
    partial_likelihood,
    partial_likelihood_gradient,
    partial_likelihood_hessian,
)
from shared.protocol import PATH_COLUMNS
from shared.utils import setup_logging


logger = setup_logging(__name__)


WEIGHT_MODES = ("empirical", "theoretical")

EPS = np.finfo(float).eps


@dataclass
class FitOptions:
    """Solver settings."""
    max_iterations: int = 100_000
    kkt_tolerance: float = 1e-8
    initial_step: float = 1.0
    backtracking: float = 0.5
    step_growth: float = 1.25
    acceleration: bool = True
    weight_mode: str = "empirical"
    polish: bool = True
    l1_radius: Optional[float] = None  # L_m; None means unconstrained
    max_abs_predictor: Optional[float] = None  # log U_m; iterates with a larger |f_theta| are rejected
    stall_window: int = 200
    # Newton reference
    newton_max_iterations: int = 200
    newton_gradient_tol: float = 1e-10
    divergence_norm: float = 1e3
    log_every: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.kkt_tolerance > 0:
            raise ValueError(f"kkt_tolerance must be > 0, got {self.kkt_tolerance}")
        if not self.initial_step > 0:
            raise ValueError(f"initial_step must be > 0, got {self.initial_step}")
        if not 0 < self.backtracking < 1:
            raise ValueError(f"backtracking factor must be in (0, 1), got {self.backtracking}")
        if self.step_growth < 1:
            raise ValueError(f"step_growth must be >= 1, got {self.step_growth}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if self.l1_radius is not None and not self.l1_radius > 0:
            raise ValueError(f"l1_radius must be > 0, got {self.l1_radius}")
        if self.max_abs_predictor is not None and not self.max_abs_predictor > 0:
            raise ValueError(f"max_abs_predictor must be > 0, got {self.max_abs_predictor}")
        if self.stall_window < 1:
            raise ValueError(f"stall_window must be >= 1, got {self.stall_window}")
        if not self.newton_gradient_tol > 0:
            raise ValueError(f"newton_gradient_tol must be > 0, got {self.newton_gradient_tol}")


@dataclass
class FitResult:
    """Outcome of one fit."""
    theta_hat: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    active_set: List[int] = field(default_factory=list)
    lam: float = 0.0
    message: str = ""

    @property
    def df(self) -> int:
        return len(self.active_set)

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "active_set": list(self.active_set),
            "lambda": self.lam,
            "message": self.message,
        }


def penalty(theta: np.ndarray, lam: float, weights: np.ndarray) -> float:
    return float(lam * np.sum(weights * np.abs(theta)))


def objective(dataset: Dataset, theta, lam: float, weights,
              max_abs_predictor: Optional[float] = None) -> float:
    """l_n(theta) + lambda * sum_k w_k |theta_k|, recomputed from scratch."""
    theta = np.asarray(theta, dtype=float)
    return partial_likelihood(dataset, theta, max_abs_predictor) + penalty(theta, lam, np.asarray(weights, dtype=float))


def kkt_residual(dataset: Dataset, theta, lam: float, weights, gradient=None) -> float:
    """
    Largest violation of the subgradient optimality conditions.

    theta_k != 0: |g_k + lambda w_k sign(theta_k)|; theta_k = 0: (|g_k| - lambda w_k)_+.
    """
    theta = np.asarray(theta, dtype=float)
    weights = np.asarray(weights, dtype=float)
    g = partial_likelihood_gradient(dataset, theta) if gradient is None else gradient
    thresh = lam * weights
    nonzero = theta != 0
    viol = np.where(nonzero,
                    np.abs(g + thresh * np.sign(theta)),
                    np.maximum(np.abs(g) - thresh, 0.0))
    return float(np.max(viol))


def lambda_max(dataset: Dataset, weights) -> float:
    """Smallest lambda at which theta_hat = 0 (over penalized coordinates)."""
    weights = np.asarray(weights, dtype=float)
    g = partial_likelihood_gradient(dataset, np.zeros(dataset.m))
    pen = weights > 0
    if not np.any(pen):
        raise ValueError("lambda_max undefined: no penalized coordinate")
    return float(np.max(np.abs(g[pen]) / weights[pen]))


def soft_threshold(v: np.ndarray, thresh: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)


def project_l1_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto {theta : sum |theta_k| <= radius}."""
    a = np.abs(v)
    if a.sum() <= radius:
        return v
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, u.size + 1)
    rho = np.nonzero(u * ks > css - radius)[0][-1]
    shift = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - shift, 0.0)


def resolve_weights(dataset: Dataset, opts: FitOptions, ctx=None) -> np.ndarray:
    """Penalty weights per opts.weight_mode (theoretical weights need a PopulationContext)."""
    if opts.weight_mode == "empirical":
        return empirical_sigma(dataset)
    if ctx is None:
        raise ValueError("Theoretical weights need a population context")
    from coxlasso.population import sigma
    return sigma(ctx)


def _check_inputs(dataset: Dataset, lam: float, weights) -> np.ndarray:
    if not (lam >= 0 and math.isfinite(lam)):
        raise ValueError(f"lambda must be finite and >= 0, got {lam}")
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (dataset.m,):
        raise ValueError(f"weights must have length {dataset.m}, got shape {weights.shape}")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and >= 0")
    if dataset.n_events == 0:
        raise ValueError("No events in dataset: the penalized partial likelihood has no informative minimizer")
    zero = np.flatnonzero(weights == 0)
    if zero.size and lam > 0:
        logger.warning(f"Zero penalty weight on basis functions {(zero + 1).tolist()}: left unpenalized")
    return weights


def _polish(dataset: Dataset, theta: np.ndarray, lam: float, weights: np.ndarray,
            target: float, max_steps: int = 20,
            max_abs_predictor: Optional[float] = None) -> np.ndarray:
    """
    Newton steps on the active set with signs held fixed.

    Zero coordinates that violate the KKT conditions join the active set
    with sign -sign(g_k). A step is kept when no active sign flips and it
    lowers the objective, or leaves it within rounding while shrinking the
    active-set residual.
    """
    g = partial_likelihood_gradient(dataset, theta)
    thresh = lam * weights
    entering = (theta == 0) & (weights > 0) & (np.abs(g) > thresh)
    active = np.flatnonzero((theta != 0) | (weights == 0) | entering)
    if active.size == 0:
        return theta
    signs = np.where(theta[active] != 0, np.sign(theta[active]), -np.sign(g[active]))
    signs[thresh[active] == 0] = 0.0
    current = objective(dataset, theta, lam, weights, max_abs_predictor)
    rhs = g[active] + thresh[active] * signs
    for _ in range(max_steps):
        size = float(np.max(np.abs(rhs)))
        if size <= target:
            break
        h = partial_likelihood_hessian(dataset, theta)
        try:
            step = linalg.solve(h[np.ix_(active, active)], -rhs, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            break
        trial = theta.copy()
        trial[active] += step
        penalized = signs != 0
        if np.any(np.sign(trial[active][penalized]) != signs[penalized]):
            break
        value = objective(dataset, trial, lam, weights, max_abs_predictor)
        trial_rhs = partial_likelihood_gradient(dataset, trial)[active] + thresh[active] * signs
        rounding = 64.0 * EPS * max(1.0, abs(current))
        if not (value <= current or (value <= current + rounding and np.max(np.abs(trial_rhs)) < size)):
            break
        theta, current, rhs = trial, value, trial_rhs
    return theta


def fit_lasso(dataset: Dataset, lam: float, weights=None, opts: Optional[FitOptions] = None,
              theta0=None) -> FitResult:
    """
    Minimize l_n(theta) + lam * sum_k w_k |theta_k|.

    Args:
        dataset: Sample with at least one event
        lam: Penalty level >= 0
        weights: Penalty weights (default: empirical sigma_hat)
        opts: Solver settings
        theta0: Warm start (default 0)

    Returns:
        FitResult; converged=False (not an exception) when max_iterations runs out
        or the iteration stalls short of the tolerance

    Raises:
        ValueError: an iterate leaves |f_theta| <= opts.max_abs_predictor
    """
    opts = opts or FitOptions()
    if weights is None:
        weights = empirical_sigma(dataset)
    weights = _check_inputs(dataset, lam, weights)
    thresh = lam * weights
    radius = opts.l1_radius
    box = opts.max_abs_predictor

    def prox(v: np.ndarray, step: float) -> np.ndarray:
        out = soft_threshold(v, step * thresh)
        return project_l1_ball(out, radius) if radius is not None else out

    def evaluate(theta: np.ndarray):
        return loss_and_gradient(dataset, theta, box)

    x = np.zeros(dataset.m) if theta0 is None else np.array(theta0, dtype=float)
    if radius is not None:
        x = project_l1_ball(x, radius)
    f_x, g_x = evaluate(x)
    F_x = f_x + penalty(x, lam, weights)
    step = opts.initial_step

    def residual(theta: np.ndarray, g: np.ndarray) -> float:
        if radius is not None and np.sum(np.abs(theta)) >= radius * (1 - 1e-12):
            # constraint active: size of the projected gradient map
            return float(np.max(np.abs(theta - prox(theta - step * g, step))) / step)
        return kkt_residual(dataset, theta, lam, weights, gradient=g)

    res = residual(x, g_x)
    y, f_y, g_y = x, f_x, g_x
    t = 1.0
    stable = 0
    iteration = 0
    best_res = res
    window_start = (F_x, res)
    stalled = False
    while res > opts.kkt_tolerance and iteration < opts.max_iterations:
        if iteration and iteration % opts.stall_window == 0:
            # objective flat and residual no longer shrinking: rounding floor of the line search
            F_start, res_start = window_start
            if F_start - F_x <= 1e-12 * max(1.0, abs(F_x)) and best_res >= 0.99 * res_start:
                stalled = True
                break
            window_start = (F_x, best_res)
        iteration += 1

        # backtracking on the quadratic upper model at y
        accepted = False
        while step >= 1e-20:
            z = prox(y - step * g_y, step)
            d = z - y
            f_z, g_z = evaluate(z)
            if f_z <= f_y + g_y @ d + (d @ d) / (2.0 * step) + 64.0 * EPS * max(1.0, abs(f_y)):
                accepted = True
                break
            step *= opts.backtracking
        if not accepted:
            if y is x:
                stalled = True
                break
            # drop the momentum and retry from x
            t, step = 1.0, opts.initial_step
            y, f_y, g_y = x, f_x, g_x
            continue
        F_z = f_z + penalty(z, lam, weights)

        if F_z > F_x and y is not x:
            # function-value restart
            t = 1.0
            y, f_y, g_y = x, f_x, g_x
            continue

        support_changed = not np.array_equal(z != 0, x != 0)
        x_prev = x
        x, f_x, g_x, F_x = z, f_z, g_z, F_z
        if opts.acceleration:
            t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
            y = x + ((t - 1.0) / t_next) * (x - x_prev)
            t = t_next
            # the extrapolated point may leave the l1 ball; only prox iterates are boxed
            f_y, g_y = loss_and_gradient(dataset, y)
        else:
            y, f_y, g_y = x, f_x, g_x
        step *= opts.step_growth

        res = residual(x, g_x)
        stable = 0 if support_changed else stable + 1
        if opts.polish and radius is None and stable >= 10 and res > opts.kkt_tolerance:
            polished = _polish(dataset, x, lam, weights, 0.01 * opts.kkt_tolerance, max_abs_predictor=box)
            if polished is not x:
                x = polished
                f_x, g_x = evaluate(x)
                F_x = f_x + penalty(x, lam, weights)
                y, f_y, g_y, t = x, f_x, g_x, 1.0
                res = residual(x, g_x)
            stable = 0
        best_res = min(best_res, res)
        if opts.log_every and iteration % opts.log_every == 0:
            logger.debug(f"iter {iteration}: objective={F_x:.12g} step={step:.3g} kkt={res:.3e}")

    if res > opts.kkt_tolerance and opts.polish and radius is None:
        polished = _polish(dataset, x, lam, weights, 0.01 * opts.kkt_tolerance, max_abs_predictor=box)
        if polished is not x:
            x = polished
            f_x, g_x = evaluate(x)
            res = residual(x, g_x)

    converged = res <= opts.kkt_tolerance
    message = ""
    if not converged:
        reason = "stalled" if stalled else "stopped"
        message = f"KKT residual {res:.3e}, {reason} after {iteration} iterations"
        logger.warning(f"fit_lasso(lambda={lam:.6g}) did not converge: {message}")
    elif stalled:
        logger.debug(f"fit_lasso(lambda={lam:.6g}) stalled at iteration {iteration}, polish converged")
    return FitResult(
        theta_hat=x,
        objective=objective(dataset, x, lam, weights, box),
        kkt_residual=res,
        iterations=iteration,
        converged=converged,
        active_set=np.flatnonzero(x).tolist(),
        lam=float(lam),
        message=message,
    )


def fit_mle(dataset: Dataset, opts: Optional[FitOptions] = None, theta0=None) -> FitResult:
    """
    Unpenalized Cox MLE by Newton's method with step halving.

    Monotone likelihood (no finite MLE) shows up as the parameter norm running
    past opts.divergence_norm; the result then has converged=False and says so.
    """
    opts = opts or FitOptions()
    if dataset.n_events == 0:
        raise ValueError("No events in dataset: the MLE does not exist")
    theta = np.zeros(dataset.m) if theta0 is None else np.array(theta0, dtype=float)
    loss, g = loss_and_gradient(dataset, theta)
    weights = np.zeros(dataset.m)
    message = ""
    iteration = 0
    while True:
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= opts.newton_gradient_tol:
            break
        if iteration >= opts.newton_max_iterations:
            message = f"gradient {gnorm:.3e} after {iteration} Newton iterations"
            break
        iteration += 1
        h = partial_likelihood_hessian(dataset, theta)
        try:
            direction = linalg.solve(h, -g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            direction = linalg.lstsq(h, -g)[0]
        slope = float(g @ direction)
        if not slope < 0:
            direction, slope = -g, -float(g @ g)

        s = 1.0
        trial = theta + direction
        trial_loss = partial_likelihood(dataset, trial)
        while trial_loss > loss + 1e-4 * s * slope and s > 1e-12:
            s *= 0.5
            trial = theta + s * direction
            trial_loss = partial_likelihood(dataset, trial)
        if s <= 1e-12:
            message = f"line search failed at gradient {gnorm:.3e}"
            break
        # extrapolate while the full step keeps lowering the loss
        if s == 1.0 and np.max(np.abs(direction)) >= 0.1:
            while np.linalg.norm(trial) <= opts.divergence_norm:
                longer = theta + 2.0 * s * direction
                longer_loss = partial_likelihood(dataset, longer)
                if not longer_loss <= trial_loss:
                    break
                s *= 2.0
                trial, trial_loss = longer, longer_loss

        theta, loss = trial, trial_loss
        if np.linalg.norm(theta) > opts.divergence_norm:
            message = (f"diverged: ||theta|| = {np.linalg.norm(theta):.3g} > {opts.divergence_norm:g} "
                       f"(monotone likelihood, no finite MLE)")
            break
        _, g = loss_and_gradient(dataset, theta)

    converged = message == ""
    if not converged:
        logger.warning(f"fit_mle: {message}")
    return FitResult(
        theta_hat=theta,
        objective=partial_likelihood(dataset, theta),
        kkt_residual=kkt_residual(dataset, theta, 0.0, weights),
        iterations=iteration,
        converged=converged,
        active_set=np.flatnonzero(theta).tolist(),
        lam=0.0,
        message=message,
    )


def regularization_path(dataset: Dataset, lambda_grid: Sequence[float], weights=None,
                        opts: Optional[FitOptions] = None) -> List[FitResult]:
    """
    Warm-started fits along a strictly decreasing grid.

    A non-converged fit is flagged in its FitResult; the path continues.
    """
    grid = np.asarray(lambda_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("lambda_grid must be a nonempty list")
    if np.any(grid <= 0):
        raise ValueError("lambda_grid must be positive")
    if np.any(np.diff(grid) >= 0):
        raise ValueError("lambda_grid must be strictly decreasing")
    opts = opts or FitOptions()
    if weights is None:
        weights = empirical_sigma(dataset)

    results = []
    theta = None
    for lam in grid:
        result = fit_lasso(dataset, float(lam), weights, opts, theta0=theta)
        results.append(result)
        theta = result.theta_hat
        logger.info(f"path lambda={lam:.6g}: df={result.df} objective={result.objective:.8g} "
                    f"kkt={result.kkt_residual:.2e}{'' if result.converged else ' (not converged)'}")
    return results


def path_table(results: Sequence[FitResult]) -> pd.DataFrame:
    """
    Path CSV layout: one summary row per lambda, then one row per nonzero coefficient.

    k is one-based to match the x1..xm column names.
    """
    rows = []
    for r in results:
        rows.append({"row_type": "summary", "lambda": r.lam, "k": None, "theta_k": None,
                     "objective": r.objective, "kkt_residual": r.kkt_residual,
                     "df": r.df, "converged": r.converged})
        for k in r.active_set:
            rows.append({"row_type": "coef", "lambda": r.lam, "k": k + 1,
                         "theta_k": float(r.theta_hat[k]), "objective": None,
                         "kkt_residual": None, "df": None, "converged": None})
    table = pd.DataFrame(rows, columns=PATH_COLUMNS)
    table["k"] = table["k"].astype("Int64")
    table["df"] = table["df"].astype("Int64")
    return table
