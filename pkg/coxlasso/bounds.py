"""
Bound constants and oracle quantities of the Cox lasso oracle inequalities.

Everything here is a closed-form function of the known population plus the
tuning constants (b, d, delta, r1, N1, N2, W, C0, eta):

  K_m = max_k ||psi_k||_inf / sigma_k          U_m = exp(K_m L_m sigma_max)
  a_n = sqrt(2 K_m^2 log(2m) / n) + K_m log(2m) / n,   abar_n = 4 a_n
  lamA = abar_n (1 + 2 r1 sqrt(2 (K_m^2 + abar_n K_m)) + 4 r1^2 abar_n K_m / 3)
  lamB = (2 K_m U_m^2 / pi) (2 abar_n r1 + sqrt(log(2m) / n))
  lam0 = lamA + lamB,   lam_n = (1 + b) lam0

The margin function is quadratic, G(u) = u^2 / C0 with conjugate
H(v) = C0 v^2 / 4, and ||.|| is the L2(P_X) norm of f.
"""

import itertools
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize

from coxlasso.dgp import Dgp
from coxlasso.errors import ConfigError, QuadratureError
from coxlasso.population import (
    PopulationContext,
    excess_risk,
    gram,
    l2_distance,
    linear_predictor,
    loss_gradient_hessian,
    population_gradient,
    sigma,
    sup_distance,
)
from coxlasso.solver import project_l1_ball
from coxlasso.workers import ReplicationPool
from shared.utils import make_rng, setup_logging


logger = setup_logging(__name__)


W_GRID = (1.0, 10.0, 100.0)

# Stream ids for the searches that draw random numbers
MARGIN_STREAM = 101
CONDITION2_STREAM = 102


@dataclass
class BoundConfig:
    """
    Tuning constants of the oracle inequalities.

    delta1 = (1+b)^-N1 and delta2 = (1+b)^-N2. Either give N1/N2 or give
    delta1/delta2, which must then be integer powers of 1/(1+b).
    """
    b: float = 1.0
    d: float = 2.0
    delta: float = 0.5
    r1: float = 1.0
    N1: Optional[int] = None  # default 1
    N2: Optional[int] = None  # default 0
    delta1: Optional[float] = None
    delta2: Optional[float] = None
    W: float = 1.0
    C0: Optional[float] = None  # estimated when absent
    eta: float = 0.5
    l1_radius: Optional[float] = None  # L_m; default ||theta_bar||_1
    s_max: int = 2
    margin_samples: int = 200
    condition2_starts: int = 32
    condition2_iterations: int = 40

    def __post_init__(self):
        self.N1 = self._recover("N1", self.N1, self.delta1, 1)
        self.N2 = self._recover("N2", self.N2, self.delta2, 0)
        self.validate()

    def _recover(self, name: str, count: Optional[int], value: Optional[float], default: int) -> int:
        if value is None:
            return default if count is None else count
        if not 0 < value <= 1:
            raise ConfigError(f"delta for {name} must lie in (0, 1], got {value}")
        if not self.b > 0:
            raise ConfigError(f"b must be > 0, got {self.b}")
        raw = -math.log(value) / math.log1p(self.b)
        recovered = round(raw)
        if abs(raw - recovered) > 1e-9:
            raise ConfigError(f"{name}: delta={value} is not (1+b)^-N for an integer N (got N={raw:.12g})")
        if count is not None and count != recovered:
            raise ConfigError(f"{name}={count} disagrees with its delta ({recovered})")
        return int(recovered)

    def validate(self) -> None:
        """Check stated ranges."""
        if not self.b > 0:
            raise ConfigError(f"b must be > 0, got {self.b}")
        if not self.d > 1:
            raise ConfigError(f"d must be > 1, got {self.d}")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must be in (0, 1), got {self.delta}")
        if not self.r1 > 0:
            raise ConfigError(f"r1 must be > 0, got {self.r1}")
        if int(self.N1) != self.N1 or self.N1 < 1:
            raise ConfigError(f"N1 must be an integer >= 1 (delta1 = 1 is forbidden), got {self.N1}")
        if int(self.N2) != self.N2 or self.N2 < 0:
            raise ConfigError(f"N2 must be an integer >= 0, got {self.N2}")
        if not self.W > 0:
            raise ConfigError(f"W must be > 0, got {self.W}")
        if self.C0 is not None and not self.C0 > 0:
            raise ConfigError(f"C0 must be > 0, got {self.C0}")
        if not self.eta > 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if self.l1_radius is not None and not self.l1_radius > 0:
            raise ConfigError(f"l1_radius must be > 0, got {self.l1_radius}")
        if self.s_max < 0:
            raise ConfigError(f"s_max must be >= 0, got {self.s_max}")
        if self.margin_samples < 1 or self.condition2_starts < 1 or self.condition2_iterations < 1:
            raise ConfigError("margin_samples, condition2_starts and condition2_iterations must be >= 1")

    @property
    def delta1_value(self) -> float:
        return (1.0 + self.b) ** -self.N1

    @property
    def delta2_value(self) -> float:
        return (1.0 + self.b) ** -self.N2


@dataclass
class BoundConstants:
    """Constants at sample size n."""
    n: int
    m: int
    K_m: float
    L_m: float
    sigma: List[float]
    sigma_max: float
    U_m: float
    a_n: float
    abar_n: float
    lamA: float
    lamB: float
    lam0: float
    lam_n: float
    d_b: float
    pi: float
    r1: float
    W: float

    @property
    def exponent(self) -> float:
        """exp(-n abar_n^2 r1^2), the common tail factor."""
        return math.exp(-self.n * self.abar_n ** 2 * self.r1 ** 2)

    @property
    def log_U_m(self) -> float:
        """Bound on |f_theta| over the l1 ball of radius L_m."""
        return self.K_m * self.L_m * self.sigma_max

    @property
    def at_risk_tail(self) -> float:
        return 2.0 * math.exp(-self.n * self.pi ** 2 / 2.0)

    def to_dict(self) -> dict:
        return asdict(self)


def a_n(K_m: float, m: int, n: int) -> float:
    log2m = math.log(2 * m)
    return math.sqrt(2.0 * K_m ** 2 * log2m / n) + K_m * log2m / n


def lambda_A(abar: float, K_m: float, r1: float) -> float:
    return abar * (1.0 + 2.0 * r1 * math.sqrt(2.0 * (K_m ** 2 + abar * K_m)) + 4.0 * r1 ** 2 * abar * K_m / 3.0)


def lambda_B(abar: float, K_m: float, U_m: float, pi: float, r1: float, m: int, n: int) -> float:
    return (2.0 * K_m * U_m ** 2 / pi) * (2.0 * abar * r1 + math.sqrt(math.log(2 * m) / n))


def d_b(cfg: BoundConfig) -> float:
    """d_b = d * max((b + d) / ((d - 1) b), 1)."""
    return cfg.d * max((cfg.b + cfg.d) / ((cfg.d - 1.0) * cfg.b), 1.0)


def d_delta(cfg: BoundConfig) -> float:
    """d(delta1, delta2) = 1 + (1 + (d^2 - 1) delta1) / ((d - 1)(1 - delta1)) * delta2."""
    d1, d2 = cfg.delta1_value, cfg.delta2_value
    if d1 >= 1.0:
        raise ConfigError("delta1 = 1 makes d(delta1, delta2) undefined; N1 must be >= 1")
    return 1.0 + (1.0 + (cfg.d ** 2 - 1.0) * d1) / ((cfg.d - 1.0) * (1.0 - d1)) * d2


def Delta(cfg: BoundConfig) -> float:
    """Delta(b, delta, delta1, delta2) = max(d(delta1, delta2)(1 - delta^2)/(delta b), 1)."""
    return max(d_delta(cfg) * (1.0 - cfg.delta ** 2) / (cfg.delta * cfg.b), 1.0)


def basis_sup_ratio(ctx: PopulationContext) -> float:
    """K_m = max_k max_atoms |psi_k| / sigma_k."""
    s = sigma(ctx)
    if np.any(s == 0):
        zero = (np.flatnonzero(s == 0) + 1).tolist()
        raise ValueError(f"sigma_k = 0 for basis functions {zero}: max ||psi_k||/sigma_k is infinite")
    return float(np.max(np.max(np.abs(ctx.psi), axis=0) / s))


def resolve_l1_radius(dgp: Dgp, cfg: BoundConfig) -> float:
    norm = float(np.sum(np.abs(dgp.theta_true)))
    if cfg.l1_radius is None:
        return norm if norm > 0 else 1.0
    if cfg.l1_radius < norm:
        raise ConfigError(f"l1_radius L_m={cfg.l1_radius} is below ||theta_bar||_1 = {norm}")
    return float(cfg.l1_radius)


def bound_constants(dgp: Dgp, n: int, cfg: BoundConfig) -> BoundConstants:
    """
    Compute every sample-size dependent constant.

    Raises:
        ValueError: some sigma_k = 0, or n < 1
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    ctx = PopulationContext(dgp)
    s = sigma(ctx)
    K_m = basis_sup_ratio(ctx)
    L_m = resolve_l1_radius(dgp, cfg)
    m = dgp.m
    sigma_max = float(np.max(s))
    U_m = math.exp(K_m * L_m * sigma_max)
    an = a_n(K_m, m, n)
    abar = 4.0 * an
    pi = dgp.pi()
    lamA = lambda_A(abar, K_m, cfg.r1)
    lamB = lambda_B(abar, K_m, U_m, pi, cfg.r1, m, n)
    lam0 = lamA + lamB
    constants = BoundConstants(
        n=n, m=m, K_m=K_m, L_m=L_m, sigma=s.tolist(), sigma_max=sigma_max, U_m=U_m,
        a_n=an, abar_n=abar, lamA=lamA, lamB=lamB, lam0=lam0, lam_n=(1.0 + cfg.b) * lam0,
        d_b=d_b(cfg), pi=pi, r1=cfg.r1, W=cfg.W,
    )
    logger.info(f"Bound constants at n={n}: K_m={K_m:.6g} U_m={U_m:.6g} a_n={an:.6g} "
                f"lam0={lam0:.6g} lam_n={constants.lam_n:.6g} pi={pi:.6g}")
    return constants


def weighted_norms(theta, theta_ref, sigma_w) -> Tuple[float, float, float]:
    """
    (I, I1, I2): weighted l1 norm of theta split on the support of theta_ref.

    I1 sums over {k : theta_ref_k != 0}, I2 over the rest, I = I1 + I2.
    """
    theta = np.asarray(theta, dtype=float)
    theta_ref = np.asarray(theta_ref, dtype=float)
    sigma_w = np.asarray(sigma_w, dtype=float)
    if not (theta.shape == theta_ref.shape == sigma_w.shape):
        raise ValueError(f"Length mismatch: {theta.shape}, {theta_ref.shape}, {sigma_w.shape}")
    terms = sigma_w * np.abs(theta)
    on = theta_ref != 0
    I1 = float(np.sum(terms[on]))
    I2 = float(np.sum(terms[~on]))
    return I1 + I2, I1, I2


@dataclass(frozen=True)
class QuadraticMargin:
    """G(u) = u^2 / C0 and its convex conjugate H(v) = C0 v^2 / 4."""
    C0: float

    def __post_init__(self):
        if not self.C0 > 0:
            raise ValueError(f"C0 must be > 0, got {self.C0}")

    def G(self, u):
        return np.square(u) / self.C0

    def H(self, v):
        return self.C0 * np.square(v) / 4.0

    def estimation_error(self, lam_n: float, D: float, delta: float) -> float:
        """V = 2 delta H(2 lam_n sqrt(D) / delta) = 2 C0 lam_n^2 D / delta."""
        if math.isinf(D):
            return math.inf
        return float(2.0 * delta * self.H(2.0 * lam_n * math.sqrt(D) / delta))


def margin_pair(cfg: BoundConfig) -> Tuple[Callable, Callable]:
    """(G, H) for the configured C0."""
    if cfg.C0 is None:
        raise ValueError("C0 is not set; estimate it with estimate_margin_constant first")
    margin = QuadraticMargin(cfg.C0)
    return margin.G, margin.H


def compatibility_D(dgp: Dgp, index_set: Sequence[int]) -> float:
    """
    D(K) with sum_{k in K} sigma_k |theta_k - theta~_k| <= sqrt(D(K)) ||f_theta - f_theta~||.

    With v = sigma * (theta - theta~), ||f||^2 = v^T Gamma v for the normalized Gram Gamma.
    Minimizing over the coordinates outside K leaves the Schur complement S of Gamma on K,
    and |K| / lambda_min(S) is a valid constant (|K| itself for an orthonormal basis).
    Returns inf when S is singular.

    Args:
        index_set: zero-based basis indices
    """
    K = sorted(set(int(k) for k in index_set))
    if not K:
        return 0.0
    m = dgp.m
    if K[0] < 0 or K[-1] >= m:
        raise ValueError(f"index_set must lie in [0, {m}), got {K}")
    g = gram(PopulationContext(dgp))
    J = [k for k in range(m) if k not in K]
    schur = g[np.ix_(K, K)]
    if J:
        g_kj = g[np.ix_(K, J)]
        schur = schur - g_kj @ linalg.pinvh(g[np.ix_(J, J)]) @ g_kj.T
    eig = np.linalg.eigvalsh(0.5 * (schur + schur.T))
    lam_min = float(eig[0])
    if lam_min <= 1e-12 * max(1.0, float(np.max(np.abs(np.diag(g))))):
        return math.inf
    return len(K) / lam_min


def estimate_margin_constant(ctx: PopulationContext, eta: float, samples: int, seed: int,
                             l1_radius: Optional[float] = None,
                             threads: Optional[int] = None) -> Tuple[float, dict]:
    """
    Smallest C0 with E(f_theta) >= ||f_theta - f_bar||^2 / C0 over sampled theta.

    theta = theta_bar + r u with u a random direction scaled to sup-distance 1 and
    r uniform on [0.05 eta, eta]; draws leaving the l1 ball of radius l1_radius are dropped.
    """
    theta_bar = np.asarray(ctx.dgp.theta_true)
    rng = make_rng(seed, MARGIN_STREAM)
    candidates = []
    for _ in range(samples):
        u = rng.standard_normal(ctx.m)
        scale = np.max(np.abs(linear_predictor(ctx, u)))
        r = rng.uniform(0.05 * eta, eta)
        if scale == 0:
            continue
        theta = theta_bar + r * u / scale
        if l1_radius is not None and np.sum(np.abs(theta)) > l1_radius:
            continue
        candidates.append(theta)
    if not candidates:
        raise ValueError(f"No sampled theta inside Theta within sup-distance eta={eta}")

    def ratio(i: int) -> float:
        theta = candidates[i]
        risk = excess_risk(ctx, theta)
        dist2 = l2_distance(ctx, theta, theta_bar) ** 2
        return dist2 / risk if risk > 0 else math.nan

    ratios = np.array(ReplicationPool(threads).map(ratio, len(candidates)))
    finite = ratios[np.isfinite(ratios)]
    if finite.size == 0:
        raise ValueError("Excess risk vanished on every sampled theta; C0 cannot be estimated")
    C0 = float(np.max(finite))
    details = {"samples": samples, "used": int(finite.size), "eta": eta,
               "ratio_median": float(np.median(finite)), "C0": C0}
    logger.info(f"Estimated margin constant C0={C0:.6g} from {finite.size} draws (eta={eta})")
    return C0, details


@dataclass
class OracleQuantities:
    """theta*_n and the quantities built on it."""
    theta_star: np.ndarray
    support: List[int]
    D_star: float
    V_star: float
    excess_star: float
    eps_star: float
    zeta_star: float
    cond1_ok: bool
    cond1_distance: float
    cond2_ok: bool
    cond2_distance: float
    theta_eps: np.ndarray
    cond2_heuristic: bool = True
    C0: float = 0.0
    eta: float = 0.0
    supports_searched: int = 0
    supports_skipped: List[List[int]] = field(default_factory=list)

    @property
    def certified(self) -> bool:
        return self.cond1_ok and self.cond2_ok

    def to_dict(self) -> dict:
        out = asdict(self)
        out["theta_star"] = self.theta_star.tolist()
        out["theta_eps"] = self.theta_eps.tolist()
        return out


def _minimize_on_support(ctx: PopulationContext, support: Tuple[int, ...], radius: float,
                         max_iter: int = 50, tol: float = 1e-9) -> np.ndarray:
    """Damped Newton on the expected loss over theta supported on `support`, kept in the l1 ball."""
    theta = np.zeros(ctx.m)
    S = list(support)
    if not S:
        return theta
    theta[S] = np.asarray(ctx.dgp.theta_true)[S]
    theta = project_l1_ball(theta, radius)
    loss, grad, hess = loss_gradient_hessian(ctx, theta, order=2)
    for _ in range(max_iter):
        g = grad[S]
        if np.max(np.abs(g)) <= tol:
            break
        step = linalg.solve(hess[np.ix_(S, S)], -g, assume_a="pos")
        s = 1.0
        while True:
            trial = theta.copy()
            trial[S] += s * step
            trial = project_l1_ball(trial, radius)
            trial_loss, trial_grad, trial_hess = loss_gradient_hessian(ctx, trial, order=2)
            if trial_loss <= loss or s < 1e-8:
                break
            s *= 0.5
        if s < 1e-8 or np.max(np.abs(trial - theta)) <= 1e-13:
            theta = trial if trial_loss <= loss else theta
            break
        theta, loss, grad, hess = trial, trial_loss, trial_grad, trial_hess
    return theta


def project_feasible(v: np.ndarray, center: np.ndarray, weights: np.ndarray, rho: float,
                      radius: float, sweeps: int = 100) -> np.ndarray:
    """
    Projection onto {sum w_k |theta_k - c_k| <= rho} intersected with {sum |theta_k| <= radius}.

    Dykstra's alternating projections.
    """
    def weighted_ball(z: np.ndarray) -> np.ndarray:
        u = z - center
        if np.sum(weights * np.abs(u)) <= rho:
            return z
        excess = lambda nu: np.sum(weights * np.maximum(np.abs(u) - nu * weights, 0.0)) - rho
        nu = optimize.brentq(excess, 0.0, float(np.max(np.abs(u) / weights)), xtol=1e-15)
        return center + np.sign(u) * np.maximum(np.abs(u) - nu * weights, 0.0)

    x = v.copy()
    p = np.zeros_like(v)
    q = np.zeros_like(v)
    for _ in range(sweeps):
        y = weighted_ball(x + p)
        p = x + p - y
        x_next = project_l1_ball(y + q, radius)
        q = y + q - x_next
        if np.max(np.abs(x_next - x)) <= 1e-14:
            x = x_next
            break
        x = x_next
    return x


def _condition2_search(ctx: PopulationContext, cfg: BoundConfig, constants: BoundConstants,
                       theta_star: np.ndarray, zeta_star: float, seed: int,
                       threads: Optional[int]) -> np.ndarray:
    """
    Multi-start projected (sub)gradient search for
    argmin delta E(f_theta) - 2 lam_n I1(theta - theta* | theta*) over I(theta - theta*) <= d_b zeta*/b.

    The objective is not convex; the best point found is returned.
    """
    s = np.asarray(constants.sigma)
    rho = constants.d_b * zeta_star / cfg.b
    on = theta_star != 0
    radius = constants.L_m

    def value(theta: np.ndarray) -> float:
        _, I1, _ = weighted_norms(theta - theta_star, theta_star, s)
        return cfg.delta * excess_risk(ctx, theta) - 2.0 * constants.lam_n * I1

    def run(start_index: int) -> Tuple[float, np.ndarray]:
        rng = make_rng(seed, CONDITION2_STREAM, start_index)
        if start_index == 0:
            theta = theta_star.copy()
        else:
            direction = rng.laplace(size=ctx.m) / s
            theta = theta_star + direction * rho * rng.uniform() / max(np.sum(s * np.abs(direction)), 1e-300)
        theta = project_feasible(theta, theta_star, s, rho, radius)
        best_val, best = value(theta), theta
        step = 1.0
        for _ in range(cfg.condition2_iterations):
            g = cfg.delta * population_gradient(ctx, theta)
            g = g - 2.0 * constants.lam_n * np.where(on, s * np.sign(theta - theta_star), 0.0)
            trial = project_feasible(theta - step * g, theta_star, s, rho, radius)
            val = value(trial)
            if val < best_val:
                best_val, best = val, trial
                theta = trial
            else:
                step *= 0.5
            if step < 1e-10:
                break
        return best_val, best

    runs = ReplicationPool(threads).map(run, cfg.condition2_starts)
    best_index = min(range(len(runs)), key=lambda i: (runs[i][0], i))
    return runs[best_index][1]


def oracle_quantities(ctx: PopulationContext, cfg: BoundConfig, constants: BoundConstants,
                      s_max: Optional[int] = None, seed: int = 0,
                      threads: Optional[int] = None) -> OracleQuantities:
    """
    theta*_n by support enumeration, then eps*_n, zeta*_n and Conditions I/II.

    Every support of size <= s_max gets its own constrained minimizer of the
    excess risk; the estimation error V = 2 C0 lam_n^2 D / delta uses D of the
    minimizer's actual support. Condition II comes from a heuristic search.

    Raises:
        ValueError: C0 unset, s_max > m, or no support could be evaluated
    """
    if cfg.C0 is None:
        raise ValueError("C0 is not set; estimate it with estimate_margin_constant first")
    s_max = cfg.s_max if s_max is None else s_max
    m = ctx.m
    if s_max > m:
        raise ValueError(f"s_max={s_max} exceeds m={m}")
    margin = QuadraticMargin(cfg.C0)
    radius = constants.L_m
    supports = [S for size in range(s_max + 1) for S in itertools.combinations(range(m), size)]
    D_cache: Dict[Tuple[int, ...], float] = {}

    def evaluate(i: int):
        S = supports[i]
        try:
            theta = _minimize_on_support(ctx, S, radius)
            risk = excess_risk(ctx, theta)
        except (QuadratureError, linalg.LinAlgError, ValueError) as e:
            logger.warning(f"Support {[k + 1 for k in S]} skipped: {e}")
            return None
        return theta, risk

    results = ReplicationPool(threads).map(evaluate, len(supports))
    best = None
    skipped = []
    for S, res in zip(supports, results):
        if res is None:
            skipped.append([k + 1 for k in S])
            continue
        theta, risk = res
        actual = tuple(np.flatnonzero(theta).tolist())
        if actual not in D_cache:
            D_cache[actual] = compatibility_D(ctx.dgp, actual)
        V = margin.estimation_error(constants.lam_n, D_cache[actual], cfg.delta)
        total = risk + V
        if math.isfinite(total) and (best is None or total < best[0]):
            best = (total, theta, actual, D_cache[actual], V, risk)
    if best is None:
        raise ValueError("No support produced a finite E + V")

    _, theta_star, support, D_star, V_star, risk_star = best
    eps_star = (1.0 + cfg.delta) * risk_star + V_star
    zeta_star = eps_star / constants.lam0
    theta_bar = np.asarray(ctx.dgp.theta_true)
    cond1 = sup_distance(ctx, theta_star, theta_bar)

    theta_eps = _condition2_search(ctx, cfg, constants, theta_star, zeta_star, seed, threads)
    cond2 = sup_distance(ctx, theta_eps, theta_bar)
    logger.info(f"theta*_n support={[k + 1 for k in support]} E={risk_star:.6g} V={V_star:.6g} "
                f"eps*={eps_star:.6g}; Condition I {cond1:.4g} <= {cfg.eta}: {cond1 <= cfg.eta}")
    logger.warning(f"Condition II is checked heuristically: {cond2:.4g} <= {cfg.eta}: {cond2 <= cfg.eta}")
    return OracleQuantities(
        theta_star=theta_star, support=list(support), D_star=D_star, V_star=V_star,
        excess_star=risk_star, eps_star=eps_star, zeta_star=zeta_star,
        cond1_ok=cond1 <= cfg.eta, cond1_distance=cond1,
        cond2_ok=cond2 <= cfg.eta, cond2_distance=cond2, theta_eps=theta_eps,
        C0=cfg.C0, eta=cfg.eta, supports_searched=len(supports), supports_skipped=skipped,
    )


@dataclass(frozen=True)
class TheoremProbability:
    raw: float
    clipped: float
    vacuous: bool

    def to_dict(self) -> dict:
        return {"raw": self.raw, "clipped": self.clipped, "vacuous": self.vacuous}


def _per_round_failure(constants: BoundConstants, W: float) -> float:
    """(1 + 3 W^2 / 10) exp(-n abar^2 r1^2) + 2 exp(-n pi^2 / 2)."""
    return (1.0 + 0.3 * W ** 2) * constants.exponent + constants.at_risk_tail


def theorem_probability(cfg: BoundConfig, constants: BoundConstants, n: int,
                        W: Optional[float] = None) -> TheoremProbability:
    """
    1 - log_{1+b}((1+b)^2 Delta / (delta1 delta2)) * [(1 + 3W^2/10) e^{-n abar^2 r1^2} + 2 e^{-n pi^2/2}].
    """
    if constants.n != n:
        raise ValueError(f"constants were computed for n={constants.n}, not n={n}")
    W = cfg.W if W is None else W
    rounds = math.log((1.0 + cfg.b) ** 2 * Delta(cfg) / (cfg.delta1_value * cfg.delta2_value)) / math.log1p(cfg.b)
    raw = 1.0 - rounds * _per_round_failure(constants, W)
    return TheoremProbability(raw=raw, clipped=min(max(raw, 0.0), 1.0), vacuous=raw <= 0.0)


def repetition_probability(cfg: BoundConfig, constants: BoundConstants, N: int,
                           W: Optional[float] = None) -> float:
    """Probability lower bound 1 - N [(1 + 3W^2/10) e^{...} + 2 e^{-n pi^2/2}] after N rounds."""
    if N < 0:
        raise ValueError(f"N must be >= 0, got {N}")
    return 1.0 - N * _per_round_failure(constants, cfg.W if W is None else W)


def tail_bounds(constants: BoundConstants, W: float) -> Dict[str, float]:
    """Right-hand sides of the tail inequalities checked by the harness."""
    e = constants.exponent
    return {
        "at_risk": constants.at_risk_tail,
        "sup_deviation": W ** 2 * e / 5.0,
        "sup_deviation_basis": W ** 2 * e / 10.0,
        "z_tail": e,
        "r_tail": constants.at_risk_tail + 0.3 * W ** 2 * e,
    }


def w_sensitivity(cfg: BoundConfig, constants: BoundConstants) -> Dict[str, dict]:
    """Every W-dependent bound at W in {1, 10, 100}."""
    out = {}
    for W in W_GRID:
        row = tail_bounds(constants, W)
        row["theorem_probability"] = theorem_probability(cfg, constants, constants.n, W=W).raw
        row["basic_inequality_probability"] = repetition_probability(cfg, constants, cfg.N1, W=W)
        row["path_bound_probability"] = repetition_probability(cfg, constants, cfg.N1 + cfg.N2, W=W)
        out[f"W={W:g}"] = row
    return out


def prepare_bounds(ctx: PopulationContext, cfg: BoundConfig, n: int, seed: int = 0,
                   threads: Optional[int] = None) -> Tuple[BoundConfig, BoundConstants, OracleQuantities, dict]:
    """
    Constants, margin constant and oracle quantities at sample size n.

    Returns:
        (cfg with C0 filled in, constants, oracle quantities, margin details)
    """
    constants = bound_constants(ctx.dgp, n, cfg)
    margin_details = {"source": "config", "C0": cfg.C0}
    if cfg.C0 is None:
        C0, margin_details = estimate_margin_constant(ctx, cfg.eta, cfg.margin_samples, seed,
                                                      constants.L_m, threads)
        margin_details["source"] = "estimated"
        cfg = replace(cfg, C0=C0)
    oq = oracle_quantities(ctx, cfg, constants, seed=seed, threads=threads)
    return cfg, constants, oq, margin_details


def bound_report(ctx: PopulationContext, cfg: BoundConfig, n: int, seed: int = 0,
                 threads: Optional[int] = None) -> dict:
    """All constants, oracle quantities and probability bounds as one JSON-ready dict."""
    cfg, constants, oq, margin_details = prepare_bounds(ctx, cfg, n, seed, threads)
    prob = theorem_probability(cfg, constants, n)
    return {
        "n": n,
        "bound_config": asdict(cfg),
        "constants": constants.to_dict(),
        "margin": margin_details,
        "oracle": oq.to_dict(),
        "d_b": d_b(cfg),
        "d_delta": d_delta(cfg),
        "Delta": Delta(cfg),
        "theorem_probability": prob.to_dict(),
        "basic_inequality_probability": repetition_probability(cfg, constants, cfg.N1),
        "path_bound_probability": repetition_probability(cfg, constants, cfg.N1 + cfg.N2),
        "tail_bounds": tail_bounds(constants, cfg.W),
        "w_sensitivity": w_sensitivity(cfg, constants),
    }
