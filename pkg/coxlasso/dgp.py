"""
Synthetic data-generating process for censored survival data.

The population is fully known: a finite-support covariate law, a
piecewise-constant baseline hazard, uniform censoring capped at an
administrative cutoff tau, and the true Cox coefficients. Everything the
certification harness needs to evaluate exactly (at-risk probabilities,
pi, expected losses) follows from these four pieces.

Covariate rows are stored already evaluated through the basis: with the
default coordinate basis psi_k(x) = x_k the atoms are the rows; with a
declared basis table the table rows replace them.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from coxlasso.errors import DataFormatError
from shared.protocol import DATASET_DELTA_COLUMN, DATASET_TIME_COLUMN, covariate_columns
from shared.utils import make_rng, setup_logging


logger = setup_logging(__name__)


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CovariateLaw:
    """
    Finite-support law of X.

    Attributes:
        atoms: (R, p) covariate vectors
        probs: (R,) probabilities, all positive, summing to one
        basis_table: optional (R, m) table of psi_k evaluated at each atom
    """
    atoms: np.ndarray
    probs: np.ndarray
    basis_table: Optional[np.ndarray] = None

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        probs = np.asarray(self.probs, dtype=float).ravel()
        object.__setattr__(self, "atoms", _frozen(atoms))
        object.__setattr__(self, "probs", _frozen(probs))
        if self.basis_table is not None:
            table = np.atleast_2d(np.asarray(self.basis_table, dtype=float))
            object.__setattr__(self, "basis_table", _frozen(table))
        self.validate()

    def validate(self) -> None:
        """Check the law's invariants."""
        if self.atoms.size == 0 or self.atoms.shape[0] == 0:
            raise ValueError("Covariate law needs at least one atom")
        if self.probs.shape[0] != self.atoms.shape[0]:
            raise ValueError(f"Got {self.atoms.shape[0]} atoms but {self.probs.shape[0]} probabilities")
        if not np.all(np.isfinite(self.atoms)):
            raise ValueError("Atoms must be finite")
        if np.any(self.probs <= 0):
            raise ValueError("Every atom probability must be > 0")
        if abs(math.fsum(self.probs) - 1.0) > 1e-12:
            raise ValueError(f"Atom probabilities sum to {math.fsum(self.probs)!r}, not 1")
        if np.unique(self.atoms, axis=0).shape[0] != self.atoms.shape[0]:
            raise ValueError("Atoms must be distinct")
        if self.basis_table is not None:
            if self.basis_table.shape[0] != self.atoms.shape[0]:
                raise ValueError("Basis table needs one row per atom")
            if not np.all(np.isfinite(self.basis_table)):
                raise ValueError("Basis table must be finite")

    @property
    def psi(self) -> np.ndarray:
        """(R, m) basis evaluations at the atoms."""
        return self.atoms if self.basis_table is None else self.basis_table

    @property
    def m(self) -> int:
        return self.psi.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @classmethod
    def rademacher(cls, m: int) -> 'CovariateLaw':
        """Uniform law on the sign cube {-1, 1}^m (orthonormal basis, K_m = 1)."""
        if not 1 <= m <= 12:
            raise ValueError(f"Sign-cube law supports 1 <= m <= 12, got {m}")
        grid = np.array(np.meshgrid(*([[-1.0, 1.0]] * m), indexing="ij"))
        atoms = grid.reshape(m, -1).T
        return cls(atoms, np.full(atoms.shape[0], 1.0 / atoms.shape[0]))

    @classmethod
    def random_atoms(cls, m: int, count: int, seed: int, kind: str = "sign") -> 'CovariateLaw':
        """Equiprobable law on `count` random atoms (sign or uniform[-1, 1] entries)."""
        if count < 1:
            raise ValueError(f"Atom count must be >= 1, got {count}")
        rng = make_rng(seed)
        if kind == "sign":
            if count > 2 ** m:
                raise ValueError(f"Only {2 ** m} distinct sign atoms exist for m={m}")
            rows = set()
            atoms = []
            while len(atoms) < count:
                row = tuple(rng.choice([-1.0, 1.0], size=m))
                if row not in rows:
                    rows.add(row)
                    atoms.append(row)
            atoms = np.array(atoms)
        elif kind == "uniform":
            atoms = rng.uniform(-1.0, 1.0, size=(count, m))
        else:
            raise ValueError(f"Unknown atom kind: {kind}")
        return cls(atoms, np.full(count, 1.0 / count))


@dataclass(frozen=True, eq=False)
class BaselineHazard:
    """
    Piecewise-constant baseline hazard lambda_0.

    Attributes:
        breakpoints: increasing segment starts, first one 0
        rates: hazard rate on each segment (last segment runs to infinity)
    """
    breakpoints: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", _frozen(np.ravel(self.breakpoints)))
        object.__setattr__(self, "rates", _frozen(np.ravel(self.rates)))
        self.validate()
        cum = np.concatenate([[0.0], np.cumsum(np.diff(self.breakpoints) * self.rates[:-1])])
        object.__setattr__(self, "_cum_at_breaks", _frozen(cum))

    def validate(self) -> None:
        if self.breakpoints.size == 0 or self.breakpoints[0] != 0.0:
            raise ValueError("Hazard breakpoints must start at 0")
        if self.breakpoints.size != self.rates.size:
            raise ValueError(f"Got {self.breakpoints.size} breakpoints but {self.rates.size} rates")
        if np.any(np.diff(self.breakpoints) <= 0):
            raise ValueError("Hazard breakpoints must be strictly increasing")
        if not np.all(np.isfinite(self.breakpoints)) or not np.all(np.isfinite(self.rates)):
            raise ValueError("Hazard breakpoints and rates must be finite")
        if np.any(self.rates <= 0):
            raise ValueError("Hazard rates must be > 0")

    @classmethod
    def constant(cls, rate: float) -> 'BaselineHazard':
        return cls(np.array([0.0]), np.array([rate]))

    def segment(self, t) -> np.ndarray:
        """Index of the segment containing t (right-continuous)."""
        return np.searchsorted(self.breakpoints, t, side="right") - 1

    def rate(self, t):
        """lambda_0(t)."""
        return self.rates[self.segment(t)]

    def cumulative(self, t):
        """Lambda_0(t): continuous, piecewise linear, strictly increasing."""
        t = np.asarray(t, dtype=float)
        j = self.segment(t)
        return self._cum_at_breaks[j] + self.rates[j] * (t - self.breakpoints[j])

    def inverse_cumulative(self, e):
        """Solve Lambda_0(t) = e for e >= 0."""
        e = np.asarray(e, dtype=float)
        j = np.searchsorted(self._cum_at_breaks, e, side="right") - 1
        return self.breakpoints[j] + (e - self._cum_at_breaks[j]) / self.rates[j]

    def pieces(self, upper: float) -> List[tuple]:
        """(start, end, rate) for the segments intersecting [0, upper]."""
        out = []
        for j, start in enumerate(self.breakpoints):
            if start >= upper:
                break
            end = self.breakpoints[j + 1] if j + 1 < self.breakpoints.size else upper
            out.append((float(start), float(min(end, upper)), float(self.rates[j])))
        return out


@dataclass(frozen=True, eq=False)
class CensoringLaw:
    """
    C = min(C0, tau) with C0 ~ Uniform[0, upper], independent of X.

    Attributes:
        upper: u_max, right end of the uniform law; must exceed tau
        tau: administrative cutoff
    """
    upper: float
    tau: float

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (math.isfinite(self.upper) and math.isfinite(self.tau)):
            raise ValueError(f"Censoring needs finite upper and tau, got upper={self.upper}, tau={self.tau}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.upper <= self.tau:
            raise ValueError(f"upper ({self.upper}) must exceed tau ({self.tau}) so P(C = tau) > 0")

    def survival(self, t):
        """P(C0 >= t) = P(C >= t) for 0 <= t <= tau."""
        return 1.0 - np.asarray(t, dtype=float) / self.upper


@dataclass(frozen=True, eq=False)
class Dgp:
    """The known population P of (Y, Delta, X)."""
    covariates: CovariateLaw
    hazard: BaselineHazard
    censoring: CensoringLaw
    theta_true: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta_true", _frozen(np.ravel(self.theta_true)))
        self.validate()

    def validate(self) -> None:
        self.covariates.validate()
        self.hazard.validate()
        self.censoring.validate()
        if self.theta_true.size != self.covariates.m:
            raise ValueError(f"theta_true has length {self.theta_true.size}, basis has m={self.covariates.m}")
        if not np.all(np.isfinite(self.theta_true)):
            raise ValueError("theta_true must be finite")
        if not self.pi() > 0:
            raise ValueError("P(Y >= tau) must be > 0")

    @property
    def m(self) -> int:
        return self.covariates.m

    @property
    def tau(self) -> float:
        return self.censoring.tau

    def true_linear_predictor(self) -> np.ndarray:
        """f_bar(x_r) for every atom."""
        return self.covariates.psi @ self.theta_true

    def pi(self) -> float:
        """pi = P(Y >= tau) in closed form."""
        tau = self.censoring.tau
        s_t = np.exp(-self.hazard.cumulative(tau) * np.exp(self.true_linear_predictor()))
        return float(self.censoring.survival(tau) * np.dot(self.covariates.probs, s_t))


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    n observations stored column-wise.

    Attributes:
        y: (n,) observed times
        delta: (n,) event indicators
        x: (n, m) basis-evaluated covariates
    """
    y: np.ndarray
    delta: np.ndarray
    x: np.ndarray
    sort_index: np.ndarray = field(init=False)
    canonical_index: np.ndarray = field(init=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        delta = np.asarray(self.delta).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.size == 0:
            raise ValueError("Dataset needs n >= 1 observations")
        if delta.size != y.size or x.shape[0] != y.size:
            raise ValueError(f"Column lengths differ: y={y.size}, delta={delta.size}, x={x.shape[0]}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("Dataset values must be finite")
        if np.any(y < 0):
            raise ValueError("Observed times must be >= 0")
        if not np.all((delta == 0) | (delta == 1)):
            raise ValueError("delta must be 0 or 1")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "delta", _frozen(delta, dtype=np.int64))
        object.__setattr__(self, "x", _frozen(x))
        # y ascending, ties by original index
        object.__setattr__(self, "sort_index", _frozen(np.argsort(y, kind="stable"), dtype=np.int64))
        # y, then delta, then the covariate row: depends only on the multiset of rows
        keys = [x[:, k] for k in range(x.shape[1] - 1, -1, -1)] + [delta, y]
        object.__setattr__(self, "canonical_index", _frozen(np.lexsort(keys), dtype=np.int64))

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def m(self) -> int:
        return self.x.shape[1]

    @property
    def n_events(self) -> int:
        return int(self.delta.sum())

    def __len__(self) -> int:
        return self.n

    def equals(self, other: 'Dataset') -> bool:
        """Bitwise equality of values in original row order."""
        return (np.array_equal(self.y, other.y)
                and np.array_equal(self.delta, other.delta)
                and np.array_equal(self.x, other.x))

    def permuted(self, order: Sequence[int]) -> 'Dataset':
        order = np.asarray(order)
        return Dataset(self.y[order], self.delta[order], self.x[order])

    def rescaled(self, k: int, factor: float) -> 'Dataset':
        """Copy with psi_k multiplied by factor."""
        x = np.array(self.x)
        x[:, k] *= factor
        return Dataset(self.y, self.delta, x)


def sample_dataset(dgp: Dgp, n: int, seed: int, *stream: int,
                   rng: Optional[np.random.Generator] = None) -> Dataset:
    """
    Draw n iid observations from the DGP.

    T solves Lambda_0(T) exp(f_bar(x)) = E with E standard exponential,
    C = min(Uniform[0, upper], tau), Y = min(T, C), Delta = 1(T <= C).

    Args:
        dgp: Population to sample from
        n: Number of observations (>= 1)
        seed: 64-bit seed
        stream: Optional stream ids (replication index, ...)
        rng: Generator to use instead of (seed, stream)

    Returns:
        Dataset, deterministic given (dgp, n, seed, stream)
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    dgp.validate()
    if rng is None:
        rng = make_rng(seed, *stream)

    law = dgp.covariates
    idx = rng.choice(law.size, size=n, p=law.probs)
    e = rng.standard_exponential(n)
    c0 = rng.uniform(0.0, dgp.censoring.upper, size=n)

    fbar = dgp.true_linear_predictor()[idx]
    t = dgp.hazard.inverse_cumulative(e * np.exp(-fbar))
    c = np.minimum(c0, dgp.censoring.tau)
    y = np.minimum(t, c)
    delta = (t <= c).astype(np.int64)
    return Dataset(y, delta, law.psi[idx])


def at_risk_probability(dgp: Dgp, x, t):
    """
    P(Y >= t | X = x) = S_T(t | x) * P(C >= t) for 0 <= t <= tau.

    The censoring atom at tau counts as at risk at t = tau.

    Args:
        dgp: Population
        x: basis-evaluated covariate vector (length m)
        t: time or array of times in [0, tau]
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > dgp.tau):
        raise ValueError(f"t must lie in [0, tau={dgp.tau}]")
    f = float(np.dot(np.asarray(x, dtype=float), dgp.theta_true))
    out = np.exp(-dgp.hazard.cumulative(t_arr) * math.exp(f)) * dgp.censoring.survival(t_arr)
    return float(out) if out.ndim == 0 else out


def save_csv(dataset: Dataset, path: str) -> None:
    """Write `y,delta,x1,...,xm` with round-trip float formatting."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([DATASET_TIME_COLUMN, DATASET_DELTA_COLUMN] + covariate_columns(dataset.m))
        for i in range(dataset.n):
            writer.writerow([repr(float(dataset.y[i])), int(dataset.delta[i])]
                            + [repr(float(v)) for v in dataset.x[i]])
    logger.info(f"Saved dataset: n={dataset.n}, m={dataset.m} -> {path}")


def load_csv(path: str) -> Dataset:
    """
    Read a dataset written by save_csv (or by hand).

    Raises:
        DataFormatError: bad header, non-numeric or non-finite field, delta outside
            {0, 1}, ragged row, or empty body; the message names the line
        OSError: file cannot be read
    """
    ys, deltas, xs = [], [], []
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataFormatError("empty file, expected header y,delta,x1,...", line=1)
        header = [h.strip() for h in header]
        m = len(header) - 2
        if m < 1 or header[:2] != [DATASET_TIME_COLUMN, DATASET_DELTA_COLUMN] \
                or header[2:] != covariate_columns(m):
            raise DataFormatError(f"bad header {header}, expected y,delta,x1,...,xm", line=1)

        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != m + 2:
                raise DataFormatError(f"expected {m + 2} fields, got {len(row)}", line=line)
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                raise DataFormatError(f"non-numeric field in {row}", line=line) from None
            if not all(math.isfinite(v) for v in values):
                raise DataFormatError("non-finite field", line=line)
            if values[1] not in (0.0, 1.0):
                raise DataFormatError(f"delta must be 0 or 1, got {row[1].strip()}", line=line)
            if values[0] < 0:
                raise DataFormatError(f"y must be >= 0, got {row[0].strip()}", line=line)
            ys.append(values[0])
            deltas.append(int(values[1]))
            xs.append(values[2:])

    if not ys:
        raise DataFormatError("no observations (n >= 1 required)", line=2)
    dataset = Dataset(np.array(ys), np.array(deltas), np.array(xs))
    logger.info(f"Loaded dataset: n={dataset.n}, m={dataset.m}, events={dataset.n_events} from {path}")
    return dataset
