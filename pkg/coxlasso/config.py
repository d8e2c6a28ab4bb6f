"""
Experiment configuration.

A YAML file with the blocks dgp, solver, bounds, verify and output is
mapped onto the dataclasses below. Unknown keys are rejected with their
dotted path; absent keys take the defaults written here. See docs/CONFIG.md.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Set, Union

import numpy as np
import yaml

from coxlasso.bounds import BoundConfig, BoundConstants
from coxlasso.dgp import BaselineHazard, CensoringLaw, CovariateLaw, Dgp
from coxlasso.errors import ConfigError
from coxlasso.solver import FitOptions
from shared.utils import setup_logging


logger = setup_logging(__name__)


BLOCKS = ("dgp", "solver", "bounds", "verify", "output")

CHECK_NAMES = (
    "at_risk_tail",
    "sup_deviation",
    "sup_deviation_basis",
    "symmetrization",
    "z_tail",
    "r_tail",
    "oracle",
    "basic_inequality",
    "cone_inequality",
)

LAMBDA_RULE = "(A1)"


@dataclass
class GeneratorConfig:
    """Covariate atoms built from a rule instead of listed."""
    kind: str = "rademacher"  # rademacher | random
    m: int = 4
    count: int = 16           # random only
    seed: int = 0             # random only
    entries: str = "sign"     # random only: sign | uniform


@dataclass
class HazardConfig:
    breakpoints: List[float] = field(default_factory=lambda: [0.0])
    rates: List[float] = field(default_factory=lambda: [1.0])


@dataclass
class CensoringConfig:
    upper: float = 2.0
    tau: float = 1.0


@dataclass
class SparseTheta:
    """theta_k = value for the first `size` coordinates, 0 after."""
    size: int = 1
    value: float = 0.5


@dataclass
class DgpConfig:
    atoms: Optional[List[List[float]]] = None
    probs: Optional[List[float]] = None
    generator: Optional[GeneratorConfig] = None
    basis: Optional[List[List[float]]] = None
    hazard: HazardConfig = field(default_factory=HazardConfig)
    censoring: CensoringConfig = field(default_factory=CensoringConfig)
    theta_true: Union[List[float], SparseTheta, None] = None

    def build(self) -> Dgp:
        """Construct the Dgp; ValueErrors from the domain types become ConfigErrors."""
        try:
            if self.atoms is not None and self.generator is not None:
                raise ConfigError("dgp: give either atoms or generator, not both")
            if self.atoms is not None:
                probs = self.probs
                if probs is None:
                    probs = [1.0 / len(self.atoms)] * len(self.atoms)
                law = CovariateLaw(np.array(self.atoms, dtype=float), np.array(probs, dtype=float),
                                   None if self.basis is None else np.array(self.basis, dtype=float))
            elif self.generator is not None:
                g = self.generator
                if g.kind == "rademacher":
                    law = CovariateLaw.rademacher(g.m)
                elif g.kind == "random":
                    law = CovariateLaw.random_atoms(g.m, g.count, g.seed, g.entries)
                else:
                    raise ConfigError(f"dgp.generator.kind: unknown kind {g.kind!r}")
                if self.probs is not None or self.basis is not None:
                    law = CovariateLaw(law.atoms, law.probs if self.probs is None else np.array(self.probs),
                                       None if self.basis is None else np.array(self.basis, dtype=float))
            else:
                raise ConfigError("dgp: atoms or generator is required")

            hazard = BaselineHazard(np.array(self.hazard.breakpoints, dtype=float),
                                    np.array(self.hazard.rates, dtype=float))
            censoring = CensoringLaw(float(self.censoring.upper), float(self.censoring.tau))
            if self.theta_true is None:
                theta = np.zeros(law.m)
            elif isinstance(self.theta_true, SparseTheta):
                if not 0 <= self.theta_true.size <= law.m:
                    raise ConfigError(f"dgp.theta_true.size must be in [0, {law.m}]")
                theta = np.zeros(law.m)
                theta[:self.theta_true.size] = self.theta_true.value
            else:
                theta = np.array(self.theta_true, dtype=float)
            return Dgp(law, hazard, censoring, theta)
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(f"dgp: {e}") from e


@dataclass
class SolverConfig:
    lam: Union[float, str] = LAMBDA_RULE
    lambda_scale: float = 1.0
    lambda_grid: Optional[List[float]] = None
    weight_mode: str = "empirical"
    max_iterations: int = 100_000
    kkt_tolerance: float = 1e-8
    initial_step: float = 1.0
    backtracking: float = 0.5
    step_growth: float = 1.25
    acceleration: bool = True
    polish: bool = True
    l1_constraint: bool = False  # project onto the l1 ball of radius L_m

    def fit_options(self, constants: Optional[BoundConstants] = None) -> FitOptions:
        """
        Solver settings; with l1_constraint the iterates are projected onto the
        ball of radius L_m and |f_theta| is held below log U_m (both from constants).
        """
        constrained = self.l1_constraint and constants is not None
        try:
            return FitOptions(
                max_iterations=self.max_iterations, kkt_tolerance=self.kkt_tolerance,
                initial_step=self.initial_step, backtracking=self.backtracking,
                step_growth=self.step_growth, acceleration=self.acceleration,
                weight_mode=self.weight_mode, polish=self.polish,
                l1_radius=constants.L_m if constrained else None,
                max_abs_predictor=constants.log_U_m if constrained else None,
            )
        except ValueError as e:
            raise ConfigError(f"solver: {e}") from e

    @property
    def uses_rule(self) -> bool:
        return isinstance(self.lam, str)


@dataclass
class VerifyConfig:
    checks: List[str] = field(default_factory=lambda: list(CHECK_NAMES))
    replications: int = 1000
    at_risk_replications: int = 10_000  # the at-risk tail is cheap; its bound is tiny
    fit_replications: int = 200
    n: int = 400
    n_grid: List[int] = field(default_factory=lambda: [250, 500, 1000, 2000, 4000])
    sweep_replications: int = 100
    seed: int = 0
    perturbation: Union[float, List[float]] = 0.1
    M: Optional[float] = None
    cone_samples: int = 1000
    threshold_scale: float = 1.0
    dump_replications: bool = False


@dataclass
class OutputConfig:
    dir: str = "out"
    format: str = "json"  # json | csv


@dataclass
class Config:
    """Parsed experiment configuration; `present` lists the blocks found in the file."""
    dgp: DgpConfig = field(default_factory=DgpConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    bounds: BoundConfig = field(default_factory=BoundConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    present: Set[str] = field(default_factory=set)

    def require(self, *blocks: str) -> None:
        missing = [b for b in blocks if b not in self.present]
        if missing:
            raise ConfigError(f"missing config block: {', '.join(missing)}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("present")
        out["solver"]["lambda"] = out["solver"].pop("lam")
        return out

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of the parsed configuration."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _check_keys(data: Any, cls, path: str, renames: Optional[Dict[str, str]] = None) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    renames = renames or {}
    known = {f.name for f in fields(cls)}
    out = {}
    for key, value in data.items():
        name = renames.get(key, key)
        if name not in known or name in renames.values() and key not in renames:
            raise ConfigError(f"unknown key: {path}.{key}")
        out[name] = value
    return out


def _make(cls, data: Any, path: str, renames: Optional[Dict[str, str]] = None):
    kwargs = _check_keys(data, cls, path, renames)
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _parse_dgp(data: Any) -> DgpConfig:
    kwargs = _check_keys(data, DgpConfig, "dgp")
    if kwargs.get("generator") is not None:
        kwargs["generator"] = _make(GeneratorConfig, kwargs["generator"], "dgp.generator")
    if "hazard" in kwargs:
        hazard = kwargs["hazard"]
        if isinstance(hazard, dict) and set(hazard) == {"rate"}:
            hazard = {"breakpoints": [0.0], "rates": [hazard["rate"]]}
        kwargs["hazard"] = _make(HazardConfig, hazard, "dgp.hazard")
    if "censoring" in kwargs:
        kwargs["censoring"] = _make(CensoringConfig, kwargs["censoring"], "dgp.censoring")
    theta = kwargs.get("theta_true")
    if isinstance(theta, dict):
        if set(theta) != {"sparse"}:
            raise ConfigError(f"unknown key: dgp.theta_true.{sorted(set(theta) - {'sparse'})[0]}")
        kwargs["theta_true"] = _make(SparseTheta, theta["sparse"], "dgp.theta_true.sparse")
    return DgpConfig(**kwargs)


def _parse_solver(data: Any) -> SolverConfig:
    solver = _make(SolverConfig, data, "solver", renames={"lambda": "lam"})
    if isinstance(solver.lam, str):
        if solver.lam != LAMBDA_RULE:
            raise ConfigError(f"solver.lambda: expected a number or {LAMBDA_RULE!r}, got {solver.lam!r}")
    elif not float(solver.lam) >= 0:
        raise ConfigError(f"solver.lambda must be >= 0, got {solver.lam}")
    if not solver.lambda_scale > 0:
        raise ConfigError(f"solver.lambda_scale must be > 0, got {solver.lambda_scale}")
    solver.fit_options()
    return solver


def _parse_verify(data: Any) -> VerifyConfig:
    verify = _make(VerifyConfig, data, "verify")
    unknown = [c for c in verify.checks if c not in CHECK_NAMES]
    if unknown:
        raise ConfigError(f"verify.checks: unknown checks {unknown}; known: {list(CHECK_NAMES)}")
    counts = (verify.replications, verify.at_risk_replications, verify.fit_replications,
              verify.sweep_replications)
    if min(counts) < 1:
        raise ConfigError("verify: replication counts must be >= 1")
    if verify.n < 1:
        raise ConfigError(f"verify.n must be >= 1, got {verify.n}")
    if not 0 <= verify.seed < 2 ** 64:
        raise ConfigError(f"verify.seed must be an unsigned 64-bit integer, got {verify.seed}")
    if verify.threshold_scale < 0:
        raise ConfigError(f"verify.threshold_scale must be >= 0, got {verify.threshold_scale}")
    return verify


def _parse_output(data: Any) -> OutputConfig:
    output = _make(OutputConfig, data, "output")
    if output.format not in ("json", "csv"):
        raise ConfigError(f"output.format must be json or csv, got {output.format!r}")
    return output


def parse_config(data: Any) -> Config:
    """Map a loaded YAML tree onto Config."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = [k for k in data if k not in BLOCKS]
    if unknown:
        raise ConfigError(f"unknown key: {unknown[0]}")
    config = Config(present={k for k in data if data[k] is not None})
    if data.get("dgp") is not None:
        config.dgp = _parse_dgp(data["dgp"])
    if data.get("solver") is not None:
        config.solver = _parse_solver(data["solver"])
    if data.get("bounds") is not None:
        config.bounds = _make(BoundConfig, data["bounds"], "bounds")
    if data.get("verify") is not None:
        config.verify = _parse_verify(data["verify"])
    if data.get("output") is not None:
        config.output = _parse_output(data["output"])
    return config


def load_config(path: str) -> Config:
    """
    Read and validate a YAML config.

    Raises:
        ConfigError: malformed YAML or schema violation
        OSError: file cannot be read
    """
    with open(path, "r") as f:
        text = f.read()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    config = parse_config(data)
    logger.info(f"Loaded config {path} (blocks: {sorted(config.present)}, hash {config.config_hash()[:12]})")
    return config
