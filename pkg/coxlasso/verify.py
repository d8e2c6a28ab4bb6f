"""
Monte-Carlo certification harness.

Every check draws R datasets from the known population, computes one
statistic per replication and compares the exceedance frequency (or the
mean) with the closed-form bound from coxlasso.bounds. Replication r of a
check with stream id c uses the RNG stream (seed, c, r); results are
reduced in replication order, so thread count never changes a report.
"""

import math
import time
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize

from coxlasso.bounds import (
    BoundConfig,
    BoundConstants,
    OracleQuantities,
    bound_constants,
    d_delta,
    prepare_bounds,
    project_feasible,
    repetition_probability,
    tail_bounds,
    theorem_probability,
    weighted_norms,
)
from coxlasso.dgp import Dataset, Dgp, sample_dataset
from coxlasso.emploss import intermediate_loss, partial_likelihood, suffix_sums
from coxlasso.population import (
    PopulationContext,
    excess_risk,
    expected_loss,
    mu,
    mu1,
    mu1_derivative,
    sigma,
)
from coxlasso.replication_log import ReplicationLogger
from coxlasso.solver import FitOptions, FitResult, fit_lasso
from coxlasso.workers import ReplicationPool
from shared.protocol import BoundKind, CheckResult, Verdict, VerificationReport, judge
from shared.utils import setup_logging


logger = setup_logging(__name__)


# Stream id of every check; basic_inequality reuses the oracle fits
STREAMS = {
    "at_risk_tail": 1,
    "sup_deviation": 2,
    "sup_deviation_basis": 3,
    "symmetrization": 4,
    "z_tail": 5,
    "r_tail": 6,
    "oracle": 7,
    "basic_inequality": 7,
    "cone_inequality": 9,
    "rate_sweep": 10,
}

MIN_REPLICATIONS = 1000
CONE_TOLERANCE = 1e-10


# ---------------------------------------------------------------- statistics


def z_statistic(dataset: Dataset, ctx: PopulationContext, theta, theta_star,
                population_losses: Optional[Tuple[float, float]] = None) -> float:
    """
    Z = |[l~_n(theta) - l(theta)] - [l~_n(theta*) - l(theta*)]|.

    Args:
        population_losses: (l(theta), l(theta*)) when already known
    """
    theta = np.asarray(theta, dtype=float)
    theta_star = np.asarray(theta_star, dtype=float)
    if np.array_equal(theta, theta_star):
        return 0.0
    if population_losses is None:
        population_losses = (expected_loss(ctx, theta), expected_loss(ctx, theta_star))
    l_theta, l_star = population_losses
    left = intermediate_loss(dataset, ctx, theta) - l_theta
    right = intermediate_loss(dataset, ctx, theta_star) - l_star
    return abs(left - right)


def r_statistic(dataset: Dataset, ctx: PopulationContext, theta, theta_star) -> float:
    """R = |[l_n(theta) - l~_n(theta)] - [l_n(theta*) - l~_n(theta*)]|."""
    theta = np.asarray(theta, dtype=float)
    theta_star = np.asarray(theta_star, dtype=float)
    if np.array_equal(theta, theta_star):
        return 0.0
    left = partial_likelihood(dataset, theta) - intermediate_loss(dataset, ctx, theta)
    right = partial_likelihood(dataset, theta_star) - intermediate_loss(dataset, ctx, theta_star)
    return abs(left - right)


def at_risk_fraction(dataset: Dataset, tau: float) -> float:
    """(1/n) #{i : Y_i >= tau}."""
    return float(np.count_nonzero(dataset.y >= tau)) / dataset.n


def rademacher_average(dataset: Dataset, weights: np.ndarray, rng: np.random.Generator) -> float:
    """max_k |(1/n) sum_i eps_i Delta_i psi_k(X_i) / sigma_k| for fresh Rademacher eps."""
    idx = dataset.canonical_index
    eps = rng.integers(0, 2, size=dataset.n) * 2.0 - 1.0
    terms = (eps * dataset.delta[idx])[:, None] * dataset.x[idx] / weights
    return float(np.max(np.abs(np.sum(terms, axis=0) / dataset.n)))


class SupDeviation:
    """
    sup over t in [0, tau] of |(1/n) sum_i 1(Y_i >= t) e^{f(X_i)} v(X_i) - E[...]|.

    v = 1 gives the mu deviation; with_basis gives v = psi_k / sigma_k and
    the maximum over k. The empirical process is a left-continuous step
    function, so on each gap between observed times the supremum sits at an
    end of the gap or at a critical point of the population curve. Those
    critical points do not depend on the sample and are found once here, by
    a sign-change scan of the derivative on scan_points grid points per
    hazard piece refined with brentq. Two roots inside one grid cell are
    not bracketed; raise scan_points when the basis curves wiggle.

    Args:
        ctx: Population context
        theta: Coefficients of f
        with_basis: Weight by psi_k / sigma_k
        scan_points: Grid points per hazard piece when bracketing critical points
    """

    def __init__(self, ctx: PopulationContext, theta, with_basis: bool = False, scan_points: int = 64):
        self.ctx = ctx
        self.theta = np.asarray(theta, dtype=float)
        self.with_basis = with_basis
        self.sigma = sigma(ctx)
        self.critical = self._critical_points(scan_points)

    def _critical_points(self, scan_points: int) -> np.ndarray:
        ctx = self.ctx
        points = []
        for start, end, _ in ctx.dgp.hazard.pieces(ctx.tau):
            points.extend([start, end])
            if not self.with_basis:
                continue
            grid = np.linspace(start, end, scan_points)
            slope = mu1_derivative(ctx, self.theta, grid)
            for k in range(ctx.m):
                s = slope[k]
                points.extend(grid[s == 0].tolist())
                for j in np.flatnonzero(s[:-1] * s[1:] < 0):
                    root = optimize.brentq(lambda t: mu1_derivative(ctx, self.theta, t)[k],
                                           grid[j], grid[j + 1], xtol=1e-14)
                    points.append(root)
        return np.unique(np.clip(points, 0.0, ctx.tau))

    def population(self, t: np.ndarray) -> np.ndarray:
        """Population curve(s) at times t, shape (len(t), c)."""
        if self.with_basis:
            return (mu1(self.ctx, self.theta, t) / self.sigma[:, None]).T
        return np.atleast_1d(mu(self.ctx, self.theta, t))[:, None]

    def __call__(self, dataset: Dataset) -> float:
        idx = dataset.canonical_index
        y = dataset.y[idx]
        x = dataset.x[idx]
        n = dataset.n
        w = np.exp(x @ self.theta)
        values = x * w[:, None] / self.sigma if self.with_basis else w[:, None]
        suffix = np.zeros((n + 1, values.shape[1]))
        suffix[:n] = suffix_sums(values) / n

        tau = self.ctx.tau
        knots = np.unique(y)
        points = np.unique(np.concatenate(([0.0, tau], knots, self.critical)))
        at = suffix[np.searchsorted(y, points, side="left")]
        pop = self.population(points)
        dev = float(np.max(np.abs(at - pop)))

        inner = knots[knots < tau]
        if inner.size:
            right = suffix[np.searchsorted(y, inner, side="right")]
            pop_inner = pop[np.searchsorted(points, inner)]
            dev = max(dev, float(np.max(np.abs(right - pop_inner))))
        return dev


# ------------------------------------------------------------ verdict helpers


def exceedance_summary(exceeded: Sequence[bool]) -> Tuple[float, float]:
    """(frequency, binomial standard error)."""
    arr = np.asarray(exceeded, dtype=bool)
    if arr.size == 0:
        return math.nan, 0.0
    p = float(np.mean(arr))
    return p, math.sqrt(p * (1.0 - p) / arr.size)


def mean_summary(values: Sequence[float]) -> Tuple[float, float]:
    """(mean, standard error of the mean)."""
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        return (float(arr[0]) if arr.size else math.nan), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def _require_replications(R: int) -> None:
    if R < MIN_REPLICATIONS:
        raise ValueError(f"R must be >= {MIN_REPLICATIONS}, got {R}")


def _record(recorder: Optional[ReplicationLogger], name: str, stats, threshold, exceeded) -> None:
    if recorder is not None:
        recorder.log_many(name, stats, threshold, exceeded)


def _tail_check(name: str, stats: np.ndarray, threshold: float, bound: float, seed: int,
                upper: bool = True, details: Optional[dict] = None) -> CheckResult:
    exceeded = stats >= threshold if upper else stats <= threshold
    freq, se = exceedance_summary(exceeded)
    verdict = judge(freq, se, bound, BoundKind.TAIL)
    logger.info(f"{name}: frequency {freq:.4g} (SE {se:.2g}) vs bound {bound:.4g} -> {verdict.value}")
    return CheckResult(
        name=name, replications=int(stats.size), empirical=freq, mc_standard_error=se,
        bound=bound, verdict=verdict, kind=BoundKind.TAIL, seed=seed, stream=STREAMS[name],
        threshold=threshold, details=details or {},
    )


# --------------------------------------------------------------------- checks


def check_at_risk_tail(dgp: Dgp, n: int, R: int, seed: int, threshold_scale: float = 1.0,
                       threads: Optional[int] = None,
                       recorder: Optional[ReplicationLogger] = None) -> CheckResult:
    """Frequency of {(1/n) #(Y_i >= tau) <= pi/2} against 2 exp(-n pi^2 / 2)."""
    _require_replications(R)
    pi = dgp.pi()
    threshold = (pi / 2.0) / threshold_scale if threshold_scale > 0 else math.inf
    bound = 2.0 * math.exp(-n * pi ** 2 / 2.0)
    stream = STREAMS["at_risk_tail"]
    stats = np.array(ReplicationPool(threads).replicate(
        lambda r, rng: at_risk_fraction(sample_dataset(dgp, n, seed, rng=rng), dgp.tau), R, seed, stream))
    result = _tail_check("at_risk_tail", stats, threshold, bound, seed, upper=False,
                         details={"pi": pi, "n": n, "min_fraction": float(np.min(stats))})
    _record(recorder, "at_risk_tail", stats, threshold, stats <= threshold)
    return result


def check_sup_deviation(dgp: Dgp, theta, n: int, R: int, seed: int, constants: BoundConstants,
                        with_basis: bool = False, threshold_scale: float = 1.0,
                        threads: Optional[int] = None,
                        recorder: Optional[ReplicationLogger] = None) -> CheckResult:
    """
    Exceedance of the sup-deviation over [0, tau], evaluated at the gap ends and critical points.

    Thresholds: U_m abar_n r1 (mu), K_m U_m (abar_n r1 + sqrt(log(2m)/n)) (basis-weighted).
    """
    _require_replications(R)
    if constants.n != n:
        raise ValueError(f"constants were computed for n={constants.n}, not n={n}")
    ctx = PopulationContext(dgp)
    statistic = SupDeviation(ctx, theta, with_basis=with_basis)
    c = constants
    tails = tail_bounds(c, c.W)
    if with_basis:
        name = "sup_deviation_basis"
        threshold = c.K_m * c.U_m * (c.abar_n * c.r1 + math.sqrt(math.log(2 * c.m) / n))
    else:
        name = "sup_deviation"
        threshold = c.U_m * c.abar_n * c.r1
    threshold *= threshold_scale
    stats = np.array(ReplicationPool(threads).replicate(
        lambda r, rng: statistic(sample_dataset(dgp, n, seed, rng=rng)), R, seed, STREAMS[name]))
    result = _tail_check(name, stats, threshold, tails[name], seed,
                         details={"W": c.W, "r1": c.r1, "critical_points": int(statistic.critical.size),
                                  "max_statistic": float(np.max(stats))})
    _record(recorder, name, stats, threshold, stats >= threshold)
    return result


def _checked_M(theta, theta_star, weights, M: Optional[float]) -> float:
    norm, _, _ = weighted_norms(np.asarray(theta) - np.asarray(theta_star), theta_star, weights)
    if M is None:
        return norm
    if M < norm:
        raise ValueError(f"M={M} is below I(theta - theta*) = {norm}")
    return float(M)


def check_symmetrization(dgp: Dgp, theta, theta_star, n: int, R: int, seed: int,
                         constants: BoundConstants, M: Optional[float] = None,
                         threshold_scale: float = 1.0, threads: Optional[int] = None,
                         recorder: Optional[ReplicationLogger] = None) -> CheckResult:
    """
    Monte-Carlo mean of Z against abar_n M.

    The Rademacher average max_k |(1/n) sum eps_i Delta_i psi_k / sigma_k|
    from the same replications is attached as a diagnostic against a_n.
    """
    _require_replications(R)
    ctx = PopulationContext(dgp)
    weights = sigma(ctx)
    M = _checked_M(theta, theta_star, weights, M)
    losses = (expected_loss(ctx, theta), expected_loss(ctx, theta_star))

    def one(r: int, rng: np.random.Generator) -> Tuple[float, float]:
        data = sample_dataset(dgp, n, seed, rng=rng)
        return z_statistic(data, ctx, theta, theta_star, losses), rademacher_average(data, weights, rng)

    pairs = ReplicationPool(threads).replicate(one, R, seed, STREAMS["symmetrization"])
    z = np.array([p[0] for p in pairs])
    rad = np.array([p[1] for p in pairs])

    bound = constants.abar_n * M * threshold_scale
    mean, se = mean_summary(z)
    rad_mean, rad_se = mean_summary(rad)
    rad_bound = constants.a_n * threshold_scale
    diagnostic = CheckResult(
        name="rademacher_average", replications=R, empirical=rad_mean, mc_standard_error=rad_se,
        bound=rad_bound, verdict=judge(rad_mean, rad_se, rad_bound, BoundKind.MEAN),
        kind=BoundKind.MEAN, seed=seed, stream=STREAMS["symmetrization"],
    )
    verdict = judge(mean, se, bound, BoundKind.MEAN)
    logger.info(f"symmetrization: mean Z {mean:.4g} (SE {se:.2g}) vs abar_n M = {bound:.4g} -> {verdict.value}")
    _record(recorder, "symmetrization", z, None, None)
    return CheckResult(
        name="symmetrization", replications=R, empirical=mean, mc_standard_error=se, bound=bound,
        verdict=verdict, kind=BoundKind.MEAN, seed=seed, stream=STREAMS["symmetrization"],
        details={"M": M, "slack_ratio": bound / mean if mean > 0 else math.inf},
        diagnostics=[diagnostic],
    )


def check_z_tail(dgp: Dgp, theta, theta_star, n: int, R: int, seed: int, constants: BoundConstants,
                 M: Optional[float] = None, threshold_scale: float = 1.0,
                 threads: Optional[int] = None,
                 recorder: Optional[ReplicationLogger] = None) -> CheckResult:
    """Frequency of {Z >= lamA M} against exp(-n abar_n^2 r1^2)."""
    _require_replications(R)
    ctx = PopulationContext(dgp)
    M = _checked_M(theta, theta_star, sigma(ctx), M)
    losses = (expected_loss(ctx, theta), expected_loss(ctx, theta_star))
    threshold = constants.lamA * M * threshold_scale
    stats = np.array(ReplicationPool(threads).replicate(
        lambda r, rng: z_statistic(sample_dataset(dgp, n, seed, rng=rng), ctx, theta, theta_star, losses),
        R, seed, STREAMS["z_tail"]))
    result = _tail_check("z_tail", stats, threshold, constants.exponent, seed, details={"M": M})
    _record(recorder, "z_tail", stats, threshold, stats >= threshold)
    return result


def check_r_tail(dgp: Dgp, theta, theta_star, n: int, R: int, seed: int, constants: BoundConstants,
                 M: Optional[float] = None, threshold_scale: float = 1.0,
                 threads: Optional[int] = None,
                 recorder: Optional[ReplicationLogger] = None) -> CheckResult:
    """Frequency of {R >= lamB M} against 2 exp(-n pi^2/2) + (3/10) W^2 exp(-n abar_n^2 r1^2)."""
    _require_replications(R)
    ctx = PopulationContext(dgp)
    M = _checked_M(theta, theta_star, sigma(ctx), M)
    threshold = constants.lamB * M * threshold_scale
    bound = tail_bounds(constants, constants.W)["r_tail"]
    stats = np.array(ReplicationPool(threads).replicate(
        lambda r, rng: r_statistic(sample_dataset(dgp, n, seed, rng=rng), ctx, theta, theta_star),
        R, seed, STREAMS["r_tail"]))
    result = _tail_check("r_tail", stats, threshold, bound, seed, details={"M": M, "W": constants.W})
    _record(recorder, "r_tail", stats, threshold, stats >= threshold)
    return result


def oracle_fits(dgp: Dgp, n: int, R: int, seed: int, lam: float, opts: Optional[FitOptions] = None,
                threads: Optional[int] = None,
                stream: Tuple[int, ...] = (STREAMS["oracle"],)) -> List[Optional[FitResult]]:
    """
    R lasso fits at penalty lam with theoretical weights sigma_k.

    A replication without events gives None.
    """
    weights = sigma(PopulationContext(dgp))
    opts = opts or FitOptions(weight_mode="theoretical")

    def one(r: int, rng: np.random.Generator) -> Optional[FitResult]:
        data = sample_dataset(dgp, n, seed, rng=rng)
        if data.n_events == 0:
            return None
        return fit_lasso(data, lam, weights, opts)

    fits = ReplicationPool(threads).replicate(one, R, seed, *stream)
    failed = sum(1 for f in fits if f is None or not f.converged)
    if failed:
        logger.warning(f"{failed} of {R} oracle fits are inconclusive (no events or not converged)")
    return fits


def _coverage_check(name: str, satisfied: List[bool], inconclusive: int, bound_raw: float,
                    applicable: bool, seed: int, stream: int, details: dict) -> CheckResult:
    freq, se = exceedance_summary(satisfied)
    clipped = min(max(bound_raw, 0.0), 1.0)
    details = dict(details, raw_probability=bound_raw)
    if not applicable or not satisfied:
        verdict = Verdict.NOT_APPLICABLE
    else:
        verdict = judge(freq, se, clipped, BoundKind.COVERAGE, bound_raw)
    logger.info(f"{name}: satisfied in {freq:.4g} (SE {se:.2g}) of {len(satisfied)} fits; "
                f"probability bound {bound_raw:.4g} -> {verdict.value}")
    return CheckResult(
        name=name, replications=len(satisfied), empirical=freq, mc_standard_error=se,
        bound=clipped, verdict=verdict, kind=BoundKind.COVERAGE, seed=seed, stream=stream,
        inconclusive=inconclusive, details=details,
    )


def check_oracle(dgp: Dgp, n: int, R: int, seed: int, cfg: BoundConfig, constants: BoundConstants,
                 oq: OracleQuantities, opts: Optional[FitOptions] = None,
                 fits: Optional[List[Optional[FitResult]]] = None,
                 threads: Optional[int] = None) -> Tuple[CheckResult, CheckResult]:
    """
    Satisfaction frequencies of E(f_hat) <= eps*/(1 - delta) and
    I(theta_hat - theta*) <= d(delta1, delta2) zeta*/b against the theorem's probability.

    Not applicable when Condition I fails; non-converged fits are counted as inconclusive.
    """
    ctx = PopulationContext(dgp)
    weights = np.asarray(constants.sigma)
    if fits is None:
        fits = oracle_fits(dgp, n, R, seed, constants.lam_n, opts, threads)
    risk_bound = oq.eps_star / (1.0 - cfg.delta)
    norm_bound = d_delta(cfg) * oq.zeta_star / cfg.b
    conclusive = [f for f in fits if f is not None and f.converged]
    risks = ReplicationPool(threads).map_items(lambda f: excess_risk(ctx, f.theta_hat), conclusive)
    norms = [weighted_norms(f.theta_hat - oq.theta_star, oq.theta_star, weights)[0] for f in conclusive]

    prob = theorem_probability(cfg, constants, n)
    stream = STREAMS["oracle"]
    details = {"condition1": oq.cond1_ok, "condition2_heuristic": oq.cond2_ok, "lambda": constants.lam_n,
               "vacuous_probability": prob.vacuous}
    risk_check = _coverage_check(
        "oracle_excess_risk", [r <= risk_bound for r in risks], len(fits) - len(conclusive), prob.raw,
        oq.cond1_ok, seed, stream,
        dict(details, threshold=risk_bound, median_excess_risk=float(np.median(risks)) if risks else math.nan),
    )
    norm_check = _coverage_check(
        "oracle_l1_distance", [v <= norm_bound for v in norms], len(fits) - len(conclusive), prob.raw,
        oq.cond1_ok, seed, stream,
        dict(details, threshold=norm_bound, median_distance=float(np.median(norms)) if norms else math.nan),
    )
    risk_check.threshold = risk_bound
    norm_check.threshold = norm_bound
    return risk_check, norm_check


def check_basic_inequality(dgp: Dgp, n: int, R: int, seed: int, cfg: BoundConfig,
                           constants: BoundConstants, oq: OracleQuantities,
                           opts: Optional[FitOptions] = None,
                           fits: Optional[List[Optional[FitResult]]] = None,
                           threads: Optional[int] = None) -> CheckResult:
    """
    For theta~ = s theta_hat + (1 - s) theta* with s = d zeta* / (d zeta* + b I(theta_hat - theta*)),
    frequency of I(theta~ - theta*) <= (1 + (d - 1) delta1) zeta*/b against 1 - N1 (per-round failure).
    """
    weights = np.asarray(constants.sigma)
    if fits is None:
        fits = oracle_fits(dgp, n, R, seed, constants.lam_n, opts, threads)
    conclusive = [f for f in fits if f is not None and f.converged]
    zeta = oq.zeta_star
    bound = (1.0 + (cfg.d - 1.0) * cfg.delta1_value) * zeta / cfg.b
    satisfied = []
    for f in conclusive:
        dist = weighted_norms(f.theta_hat - oq.theta_star, oq.theta_star, weights)[0]
        denom = cfg.d * zeta + cfg.b * dist
        s = cfg.d * zeta / denom if denom > 0 else 1.0
        satisfied.append(s * dist <= bound)
    raw = repetition_probability(cfg, constants, cfg.N1)
    result = _coverage_check("basic_inequality", satisfied, len(fits) - len(conclusive), raw,
                             oq.cond1_ok, seed, STREAMS["basic_inequality"],
                             {"N1": cfg.N1, "zeta_star": zeta, "threshold": bound})
    result.threshold = bound
    return result


def check_cone_inequality(ctx: PopulationContext, cfg: BoundConfig, constants: BoundConstants,
                          oq: OracleQuantities, samples: int, seed: int,
                          threads: Optional[int] = None) -> CheckResult:
    """
    max over sampled theta with I(theta - theta*) <= d_b zeta*/b of
    2 lam_n I1(theta - theta*) - [delta E(f_theta) + eps* - E(f_theta*)], which must stay <= 0.
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    stream = STREAMS["cone_inequality"]
    s = np.asarray(constants.sigma)
    rho = constants.d_b * oq.zeta_star / cfg.b
    theta_star = oq.theta_star

    def gap(theta: np.ndarray) -> float:
        _, I1, _ = weighted_norms(theta - theta_star, theta_star, s)
        rhs = cfg.delta * excess_risk(ctx, theta) + oq.eps_star - oq.excess_star
        return 2.0 * constants.lam_n * I1 - rhs

    def one(r: int, rng: np.random.Generator) -> float:
        if r == 0:
            return gap(oq.theta_eps)
        direction = rng.laplace(size=ctx.m) / s
        scale = rho * rng.uniform() / max(float(np.sum(s * np.abs(direction))), 1e-300)
        theta = project_feasible(theta_star + direction * scale, theta_star, s, rho, constants.L_m)
        return gap(theta)

    gaps = np.array(ReplicationPool(threads).replicate(one, samples, seed, stream))
    worst = float(np.max(gaps))
    applicable = oq.cond1_ok and oq.cond2_ok
    verdict = judge(worst, 0.0, CONE_TOLERANCE, BoundKind.MEAN) if applicable else Verdict.NOT_APPLICABLE
    logger.info(f"cone_inequality: max gap {worst:.4g} over {samples} points -> {verdict.value}")
    return CheckResult(
        name="cone_inequality", replications=samples, empirical=worst, mc_standard_error=0.0,
        bound=CONE_TOLERANCE, verdict=verdict, kind=BoundKind.MEAN, seed=seed, stream=stream,
        details={"radius": rho, "condition1": oq.cond1_ok, "condition2_heuristic": oq.cond2_ok},
    )


# --------------------------------------------------------------------- sweep


def rate_sweep(dgp: Dgp, n_grid: Sequence[int], R: int, seed: int, cfg: BoundConfig,
               opts: Optional[FitOptions] = None, lambda_scale: float = 1.0,
               constant_lambda: Optional[float] = None,
               threads: Optional[int] = None) -> pd.DataFrame:
    """
    Median excess risk of the lasso with lam_n per sample size, plus the log-log slope.

    Args:
        n_grid: At least 4 distinct sizes spanning a factor >= 16
        lambda_scale: Multiplies lam_n (keeps its n-dependence)
        constant_lambda: Use this penalty at every n instead

    Returns:
        DataFrame with one row per n and a final row_type == "slope" row
    """
    sizes = sorted(set(int(n) for n in n_grid))
    if len(sizes) < 4:
        raise ValueError(f"n_grid needs at least 4 distinct sizes, got {sizes}")
    if sizes[-1] < 16 * sizes[0]:
        raise ValueError(f"n_grid must span a factor >= 16, got {sizes[0]}..{sizes[-1]}")
    ctx = PopulationContext(dgp)
    rows = []
    for i, n in enumerate(sizes):
        constants = bound_constants(dgp, n, cfg)
        lam = constant_lambda if constant_lambda is not None else lambda_scale * constants.lam_n
        fits = oracle_fits(dgp, n, R, seed, lam, opts, threads, stream=(STREAMS["rate_sweep"], i))
        conclusive = [f for f in fits if f is not None and f.converged]
        zero = sum(1 for f in conclusive if f.df == 0)
        risks = ReplicationPool(threads).map_items(lambda f: excess_risk(ctx, f.theta_hat), conclusive)
        median = float(np.median(risks)) if risks else math.nan
        logger.info(f"rate_sweep n={n}: lambda={lam:.4g} median excess risk {median:.4g} "
                    f"({len(conclusive)}/{R} fits, {zero} all-zero)")
        if zero > len(conclusive) // 2:
            logger.warning(f"rate_sweep n={n}: most fits are all-zero; lambda is above lambda_max "
                           f"and the median excess risk does not move with n")
        rows.append({"row_type": "n", "n": n, "lambda": lam, "median_excess_risk": median,
                     "converged": len(conclusive), "zero_fits": zero, "replications": R, "slope": math.nan})

    medians = np.array([r["median_excess_risk"] for r in rows])
    if np.all(np.isfinite(medians)) and np.all(medians > 0):
        slope = float(np.polyfit(np.log(sizes), np.log(medians), 1)[0])
    else:
        logger.warning("Some medians are zero or missing; log-log slope undefined")
        slope = math.nan
    logger.info(f"rate_sweep slope {slope:.4g}")
    rows.append({"row_type": "slope", "n": None, "lambda": None, "median_excess_risk": None,
                 "converged": None, "zero_fits": None, "replications": None, "slope": slope})
    table = pd.DataFrame(rows)
    table["n"] = table["n"].astype("Int64")
    table["converged"] = table["converged"].astype("Int64")
    table["zero_fits"] = table["zero_fits"].astype("Int64")
    table["replications"] = table["replications"].astype("Int64")
    return table


# ---------------------------------------------------------------- orchestration


def perturbed_theta(theta_star: np.ndarray, perturbation) -> np.ndarray:
    """theta* plus a scalar (every coordinate) or vector perturbation."""
    delta = np.broadcast_to(np.asarray(perturbation, dtype=float), theta_star.shape)
    return theta_star + delta


def run_checks(config, threads: Optional[int] = None,
               recorder: Optional[ReplicationLogger] = None) -> VerificationReport:
    """
    Run every enabled check in a fixed order.

    Args:
        config: coxlasso.config.Config with dgp, bounds and verify blocks
        threads: Worker count (None: environment or core count)
        recorder: Collects per-replication statistics when given
    """
    config.require("dgp", "bounds", "verify")
    v = config.verify
    dgp = config.dgp.build()
    ctx = PopulationContext(dgp)
    n, seed, scale = v.n, v.seed, v.threshold_scale
    enabled = set(v.checks)
    logger.info(f"Verifying {sorted(enabled)} at n={n}, seed={seed}")

    timings: Dict[str, float] = {}
    started = time.perf_counter()
    constants_out: dict
    if enabled - {"at_risk_tail"}:
        cfg, constants, oq, margin = prepare_bounds(ctx, config.bounds, n, seed, threads)
        theta_star = oq.theta_star
        theta = perturbed_theta(theta_star, v.perturbation)
        constants_out = constants.to_dict()
        constants_out["margin"] = margin
        constants_out["oracle"] = oq.to_dict()
        constants_out["theta"] = theta.tolist()
    else:
        cfg, constants, oq = config.bounds, bound_constants(dgp, n, config.bounds), None
        theta_star = theta = None
        constants_out = constants.to_dict()
    timings["bounds"] = time.perf_counter() - started
    if cfg.C0 is not None:
        constants_out["theorem_probability"] = theorem_probability(cfg, constants, n).to_dict()

    opts = replace(config.solver.fit_options(constants), weight_mode="theoretical")
    fits = None

    def get_fits():
        nonlocal fits
        if fits is None:
            fits = oracle_fits(dgp, n, v.fit_replications, seed, constants.lam_n, opts, threads)
        return fits

    R = v.replications
    common = dict(threshold_scale=scale, threads=threads, recorder=recorder)
    runners = {
        "at_risk_tail": lambda: [check_at_risk_tail(dgp, n, v.at_risk_replications, seed, **common)],
        "sup_deviation": lambda: [check_sup_deviation(dgp, theta, n, R, seed, constants, False, **common)],
        "sup_deviation_basis": lambda: [check_sup_deviation(dgp, theta, n, R, seed, constants, True, **common)],
        "symmetrization": lambda: [check_symmetrization(dgp, theta, theta_star, n, R, seed, constants, v.M,
                                                        **common)],
        "z_tail": lambda: [check_z_tail(dgp, theta, theta_star, n, R, seed, constants, v.M, **common)],
        "r_tail": lambda: [check_r_tail(dgp, theta, theta_star, n, R, seed, constants, v.M, **common)],
        "oracle": lambda: list(check_oracle(dgp, n, v.fit_replications, seed, cfg, constants, oq, opts,
                                            get_fits(), threads)),
        "basic_inequality": lambda: [check_basic_inequality(dgp, n, v.fit_replications, seed, cfg, constants,
                                                            oq, opts, get_fits(), threads)],
        "cone_inequality": lambda: [check_cone_inequality(ctx, cfg, constants, oq, v.cone_samples, seed,
                                                          threads)],
    }

    checks: List[CheckResult] = []
    for name in STREAMS:
        if name not in enabled or name not in runners:
            continue
        started = time.perf_counter()
        checks.extend(runners[name]())
        timings[name] = time.perf_counter() - started

    report = VerificationReport(config=config.to_dict(), config_hash=config.config_hash(), seed=seed,
                                constants=constants_out, checks=checks, timings=timings)
    report.validate()
    failed = [c.name for c in checks if c.failed]
    logger.info(f"Verification finished: {len(checks)} checks, failed: {failed or 'none'}")
    return report
