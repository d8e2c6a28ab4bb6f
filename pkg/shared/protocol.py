"""
Record formats for the Cox lasso certification harness.

This module defines what crosses a file boundary: the dataset CSV columns,
the per-check result record, and the verification report written as JSON.
Records validate themselves and round-trip through plain dicts.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional


# Dataset CSV
DATASET_TIME_COLUMN = "y"
DATASET_DELTA_COLUMN = "delta"

# Path CSV
PATH_COLUMNS = ["row_type", "lambda", "k", "theta_k", "objective", "kkt_residual", "df", "converged"]

# Per-replication dump
REPLICATION_COLUMNS = ["replication", "statistic", "threshold", "exceeded"]

REPORT_VERSION = 1

# Exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NONCONVERGENCE = 4
EXIT_VERIFICATION_FAILED = 5

# One-sided Monte-Carlo margin, in standard errors
MC_MARGIN = 3.0


def covariate_columns(m: int) -> List[str]:
    return [f"x{k}" for k in range(1, m + 1)]


class Verdict(str, Enum):
    """Outcome of a single check."""
    PASS = "pass"
    FAIL = "fail"
    VACUOUS = "vacuous"
    NOT_APPLICABLE = "not_applicable"


class BoundKind(str, Enum):
    """How the empirical value is compared with the theoretical one."""
    TAIL = "tail"          # exceedance frequency <= bound; vacuous when bound >= 1
    MEAN = "mean"          # Monte-Carlo mean <= bound
    COVERAGE = "coverage"  # satisfaction frequency >= probability; vacuous when raw <= 0
    REPORT = "report"      # diagnostic only, never fails


def encode_float(value: Optional[float]) -> Any:
    """JSON-safe float: non-finite values become strings."""
    if value is None:
        return None
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def decode_float(value: Any) -> Optional[float]:
    if value is None:
        return None
    return float(value)


def jsonable(obj: Any) -> Any:
    """Recursively convert numpy scalars/arrays and non-finite floats for json.dumps."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, int):
        return obj
    if hasattr(obj, "tolist"):
        return jsonable(obj.tolist())
    if isinstance(obj, float):
        return encode_float(obj)
    try:
        return encode_float(float(obj))
    except (TypeError, ValueError):
        return str(obj)


def dumps(obj: Any) -> str:
    """Deterministic JSON text (sorted keys, fixed separators)."""
    return json.dumps(jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def judge(empirical: float, standard_error: float, bound: float, kind: BoundKind,
          raw_bound: Optional[float] = None) -> Verdict:
    """
    Verdict rule shared by every check.

    Tail and mean checks fail only when empirical - 3 SE exceeds the bound;
    coverage checks fail only when empirical + 3 SE falls below it.
    """
    if kind == BoundKind.REPORT:
        return Verdict.PASS
    if kind == BoundKind.TAIL:
        if bound >= 1.0:
            return Verdict.VACUOUS
        return Verdict.FAIL if empirical - MC_MARGIN * standard_error > bound else Verdict.PASS
    if kind == BoundKind.MEAN:
        return Verdict.FAIL if empirical - MC_MARGIN * standard_error > bound else Verdict.PASS
    if kind == BoundKind.COVERAGE:
        raw = bound if raw_bound is None else raw_bound
        if raw <= 0.0:
            return Verdict.VACUOUS
        return Verdict.FAIL if empirical + MC_MARGIN * standard_error < bound else Verdict.PASS
    raise ValueError(f"Unknown bound kind: {kind}")


@dataclass
class CheckResult:
    """
    Result of one Monte-Carlo check.

    Attributes:
        name: Check identifier (e.g. "at_risk_tail")
        replications: Number of replications R that entered the statistic
        empirical: Mean or exceedance/satisfaction frequency
        mc_standard_error: Standard error of `empirical`
        bound: Theoretical value it is compared with
        verdict: pass / fail / vacuous / not_applicable
        kind: How empirical and bound are compared
        seed: Top-level seed; replication r used stream (seed, stream, r)
        stream: Stream id of this check
        threshold: Exceedance threshold of the statistic, when there is one
        inconclusive: Replications left out (e.g. non-converged fits)
        details: Free-form extra numbers
        diagnostics: Nested results computed from the same replications
    """
    name: str
    replications: int
    empirical: float
    mc_standard_error: float
    bound: float
    verdict: Verdict
    kind: BoundKind = BoundKind.TAIL
    seed: int = 0
    stream: int = 0
    threshold: Optional[float] = None
    inconclusive: int = 0
    details: Dict[str, Any] = field(default_factory=dict)
    diagnostics: List['CheckResult'] = field(default_factory=list)

    def validate(self) -> None:
        """Check the verdict agrees with the shared rule."""
        if self.replications < 0:
            raise ValueError(f"Invalid replications: {self.replications}")
        if self.mc_standard_error < 0 or math.isnan(self.mc_standard_error):
            raise ValueError(f"Invalid mc_standard_error: {self.mc_standard_error}")
        if self.verdict == Verdict.NOT_APPLICABLE:
            return
        raw = self.details.get("raw_probability") if self.kind == BoundKind.COVERAGE else None
        expected = judge(self.empirical, self.mc_standard_error, self.bound, self.kind, raw)
        if expected != self.verdict:
            raise ValueError(f"{self.name}: verdict {self.verdict.value} disagrees with rule ({expected.value})")

    @property
    def failed(self) -> bool:
        return self.verdict == Verdict.FAIL or any(d.failed for d in self.diagnostics)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "replications": self.replications,
            "empirical": encode_float(self.empirical),
            "mc_standard_error": encode_float(self.mc_standard_error),
            "bound": encode_float(self.bound),
            "verdict": self.verdict.value,
            "kind": self.kind.value,
            "seed": self.seed,
            "stream": self.stream,
            "threshold": encode_float(self.threshold),
            "inconclusive": self.inconclusive,
            "details": jsonable(self.details),
            "diagnostics": [d.to_dict() for d in self.diagnostics],
        }

    @classmethod
    def from_dict(cls, d: dict) -> 'CheckResult':
        return cls(
            name=d["name"],
            replications=d["replications"],
            empirical=decode_float(d["empirical"]),
            mc_standard_error=decode_float(d["mc_standard_error"]),
            bound=decode_float(d["bound"]),
            verdict=Verdict(d["verdict"]),
            kind=BoundKind(d.get("kind", "tail")),
            seed=d.get("seed", 0),
            stream=d.get("stream", 0),
            threshold=decode_float(d.get("threshold")),
            inconclusive=d.get("inconclusive", 0),
            details=d.get("details", {}),
            diagnostics=[cls.from_dict(x) for x in d.get("diagnostics", [])],
        )


@dataclass
class VerificationReport:
    """Everything one `verify` run produced. Timings are kept out of the JSON."""
    config: dict
    config_hash: str
    seed: int
    constants: dict
    checks: List[CheckResult] = field(default_factory=list)
    version: int = REPORT_VERSION
    timings: Dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        names = [c.name for c in self.checks]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"Checks present more than once: {duplicates}")
        for check in self.checks:
            check.validate()

    @property
    def failed(self) -> bool:
        return any(c.failed for c in self.checks)

    def get(self, name: str) -> Optional[CheckResult]:
        for check in self.checks:
            if check.name == name:
                return check
        return None

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "config": jsonable(self.config),
            "config_hash": self.config_hash,
            "seed": self.seed,
            "constants": jsonable(self.constants),
            "checks": [c.to_dict() for c in self.checks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> 'VerificationReport':
        return cls(
            config=d["config"],
            config_hash=d["config_hash"],
            seed=d["seed"],
            constants=d.get("constants", {}),
            checks=[CheckResult.from_dict(c) for c in d.get("checks", [])],
            version=d.get("version", REPORT_VERSION),
        )

    def save(self, path: str) -> None:
        """Write the report JSON and a timing sidecar next to it."""
        self.validate()
        with open(path, "w") as f:
            f.write(dumps(self.to_dict()))
        if self.timings:
            with open(timing_path(path), "w") as f:
                f.write(dumps(self.timings))

    @classmethod
    def load(cls, path: str) -> 'VerificationReport':
        with open(path, "r") as f:
            return cls.from_dict(json.load(f))


def timing_path(report_path: str) -> str:
    stem = report_path[:-5] if report_path.endswith(".json") else report_path
    return stem + ".timing.json"
