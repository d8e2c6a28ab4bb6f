#!/usr/bin/env python3
"""
Command-line front end.

Usage:
    python -m coxlasso.cli simulate --config configs/small.yaml --out data.csv
    python -m coxlasso.cli fit data.csv --config configs/small.yaml
    python -m coxlasso.cli bounds --config configs/small.yaml
    python -m coxlasso.cli verify --config configs/small.yaml --threads 4
    python -m coxlasso.cli sweep --config configs/sweep.yaml --out sweep.csv

Exit codes: 0 success, 2 config error, 3 I/O error, 4 solver did not
converge, 5 a verification check failed.
"""

import argparse
import os
import sys
from dataclasses import replace
from typing import Optional

import numpy as np
import pandas as pd

from coxlasso.bounds import bound_constants, bound_report
from coxlasso.config import Config, load_config
from coxlasso.dgp import load_csv, sample_dataset, save_csv
from coxlasso.errors import ConfigError, ConvergenceError, DataFormatError
from coxlasso.population import PopulationContext, event_probability
from coxlasso.replication_log import ReplicationLogger
from coxlasso.solver import fit_lasso, fit_mle, lambda_max, path_table, regularization_path, resolve_weights
from coxlasso.verify import rate_sweep, run_checks
from coxlasso.workers import resolve_threads
from shared.protocol import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_NONCONVERGENCE,
    EXIT_OK,
    EXIT_VERIFICATION_FAILED,
    dumps,
)
from shared.utils import set_log_level, setup_logging


logger = setup_logging(__name__)


class ExperimentController:
    """
    Runs one subcommand against a parsed config.

    Args:
        config: Parsed configuration
        threads: Worker count (None: COXLASSO_THREADS or core count)
        out_path: Output file (None: stdout or the config's output.dir)
        fmt: "json" or "csv"
    """

    def __init__(self, config: Config, threads: Optional[int] = None,
                 out_path: Optional[str] = None, fmt: Optional[str] = None):
        self.config = config
        self.threads = resolve_threads(threads)
        self.out_path = out_path
        self.format = fmt or config.output.format
        logger.info(f"Controller ready (threads={self.threads}, format={self.format}, "
                    f"config hash {config.config_hash()[:12]})")

    def _default_path(self, name: str) -> str:
        if self.out_path:
            return self.out_path
        os.makedirs(self.config.output.dir, exist_ok=True)
        return os.path.join(self.config.output.dir, name)

    def _emit(self, text: str) -> None:
        """Write to out_path, or stdout when none was given."""
        if self.out_path:
            with open(self.out_path, "w") as f:
                f.write(text)
            logger.info(f"Wrote {self.out_path}")
        else:
            sys.stdout.write(text)
            sys.stdout.flush()

    # -------------------------------------------------------------- commands

    def cmd_simulate(self) -> int:
        """Draw verify.n observations with verify.seed and write the dataset CSV."""
        self.config.require("dgp")
        dgp = self.config.dgp.build()
        v = self.config.verify
        dataset = sample_dataset(dgp, v.n, v.seed)
        path = self._default_path("dataset.csv")
        save_csv(dataset, path)
        expected = dataset.n * event_probability(PopulationContext(dgp))
        logger.info(f"Simulated n={dataset.n} ({dataset.n_events} events, {expected:.1f} expected) -> {path}")
        return EXIT_OK

    def _penalty(self, n: int) -> tuple:
        """(lambda, constants or None) for the solver block."""
        solver = self.config.solver
        if not solver.uses_rule:
            return float(solver.lam) * solver.lambda_scale, None
        self.config.require("dgp", "bounds")
        constants = bound_constants(self.config.dgp.build(), n, self.config.bounds)
        return solver.lambda_scale * constants.lam_n, constants

    def cmd_fit(self, data_path: str) -> int:
        """Fit the weighted lasso (or a path) to a dataset CSV and report with the KKT certificate."""
        self.config.require("solver")
        dataset = load_csv(data_path)
        solver = self.config.solver
        needs_population = solver.weight_mode == "theoretical" or solver.l1_constraint or solver.uses_rule
        ctx, constants = None, None
        if needs_population:
            self.config.require("dgp", "bounds")
            dgp = self.config.dgp.build()
            if dgp.m != dataset.m:
                raise ConfigError(f"dataset has m={dataset.m} covariates, dgp has m={dgp.m}")
            ctx = PopulationContext(dgp)
            constants = bound_constants(dgp, dataset.n, self.config.bounds)
        opts = solver.fit_options(constants)
        weights = resolve_weights(dataset, opts, ctx)

        if solver.lambda_grid:
            results = regularization_path(dataset, solver.lambda_grid, weights, opts)
            table = path_table(results)
            if self.format == "csv":
                self._emit(table.to_csv(index=False))
            else:
                self._emit(dumps({"path": [r.to_dict() for r in results]}))
            converged = all(r.converged for r in results)
        else:
            lam, constants = self._penalty(dataset.n)
            result = fit_lasso(dataset, lam, weights, opts)
            output = {"fit": result.to_dict(), "lambda_max": lambda_max(dataset, weights),
                      "weights": weights.tolist(), "n": dataset.n, "m": dataset.m}
            if constants is not None:
                output["constants"] = constants.to_dict()
            if lam == 0:
                reference = fit_mle(dataset, opts)
                output["newton"] = reference.to_dict()
                output["newton_max_difference"] = float(np.max(np.abs(reference.theta_hat - result.theta_hat)))
            if self.format == "csv":
                self._emit(path_table([result]).to_csv(index=False))
            else:
                self._emit(dumps(output))
            converged = result.converged
        if not converged:
            raise ConvergenceError("solver did not reach the KKT tolerance")
        return EXIT_OK

    def cmd_bounds(self) -> int:
        """Every bound constant, the oracle quantities and the probability bounds at verify.n."""
        self.config.require("dgp", "bounds")
        v = self.config.verify
        ctx = PopulationContext(self.config.dgp.build())
        report = bound_report(ctx, self.config.bounds, v.n, v.seed, self.threads)
        report["config_hash"] = self.config.config_hash()
        report["seed"] = v.seed
        if self.format == "csv":
            rows = [{"name": k, "value": val} for k, val in sorted(report["constants"].items())
                    if not isinstance(val, list)]
            self._emit(pd.DataFrame(rows).to_csv(index=False))
        else:
            self._emit(dumps(report))
        return EXIT_OK

    def cmd_verify(self) -> int:
        """Run the enabled checks; exit 5 when any of them failed."""
        recorder = None
        if self.config.verify.dump_replications:
            recorder = ReplicationLogger(os.path.join(self.config.output.dir, "replications"))
        report = run_checks(self.config, self.threads, recorder)
        if recorder is not None:
            recorder.close()
        path = self._default_path("report.json" if self.format == "json" else "report.csv")
        if self.format == "csv":
            rows = [{k: v for k, v in c.to_dict().items() if k not in ("details", "diagnostics")}
                    for c in report.checks]
            pd.DataFrame(rows).to_csv(path, index=False)
        else:
            report.save(path)
        logger.info(f"Report -> {path}")
        return EXIT_VERIFICATION_FAILED if report.failed else EXIT_OK

    def cmd_sweep(self) -> int:
        """Median excess risk over verify.n_grid with the log-log slope row."""
        self.config.require("dgp", "bounds", "verify")
        v = self.config.verify
        solver = self.config.solver
        dgp = self.config.dgp.build()
        constants = bound_constants(dgp, v.n_grid[0], self.config.bounds) if solver.l1_constraint else None
        opts = replace(solver.fit_options(constants), weight_mode="theoretical")
        constant = None if solver.uses_rule else float(solver.lam)
        table = rate_sweep(dgp, v.n_grid, v.sweep_replications, v.seed, self.config.bounds, opts,
                           lambda_scale=solver.lambda_scale, constant_lambda=constant, threads=self.threads)
        path = self._default_path("sweep.csv" if self.format == "csv" else "sweep.json")
        if self.format == "csv":
            table.to_csv(path, index=False)
        else:
            with open(path, "w") as f:
                f.write(dumps(table.astype(object).where(table.notna(), None).to_dict(orient="records")))
        logger.info(f"Sweep table -> {path}")
        return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Cox lasso solver and oracle-inequality certification harness",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument('command', choices=["simulate", "fit", "bounds", "verify", "sweep"],
                        help='Subcommand to run')
    parser.add_argument('data', nargs='?', default=None,
                        help='Dataset CSV (fit only)')
    parser.add_argument('--config', type=str, required=True,
                        help='YAML config file')
    parser.add_argument('--out', type=str, default=None,
                        help='Output file (default: stdout for fit/bounds, output.dir otherwise)')
    parser.add_argument('--seed', type=int, default=None,
                        help='Override verify.seed (unsigned 64-bit)')
    parser.add_argument('--threads', type=int, default=None,
                        help='Worker threads (default: COXLASSO_THREADS or core count)')
    parser.add_argument('--format', choices=["json", "csv"], default=None,
                        help='Output format (default: output.format)')
    parser.add_argument('--log-level', type=str, default=None,
                        help='DEBUG, INFO, WARNING or ERROR')
    return parser


def main(argv=None) -> int:
    """Main entry point; returns the exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.log_level:
            set_log_level(args.log_level)
        config = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
            config.verify.seed = args.seed
        if args.threads is not None and args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")

        controller = ExperimentController(config, args.threads, args.out, args.format)
        if args.command == "simulate":
            return controller.cmd_simulate()
        if args.command == "fit":
            if not args.data:
                raise ConfigError("fit needs a dataset CSV path")
            return controller.cmd_fit(args.data)
        if args.command == "bounds":
            return controller.cmd_bounds()
        if args.command == "verify":
            return controller.cmd_verify()
        return controller.cmd_sweep()

    except (ConfigError, DataFormatError) as e:
        logger.debug("Configuration error", exc_info=True)
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG
    except ConvergenceError as e:
        logger.error(f"Not converged: {e}")
        return EXIT_NONCONVERGENCE
    except OSError as e:
        logger.debug("I/O error", exc_info=True)
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    except ValueError as e:
        logger.debug("Invalid input", exc_info=True)
        logger.error(f"Invalid input: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
