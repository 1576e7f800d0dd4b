# Copyright 2025 Raza Ahmad. Licensed under Apache 2.0.

"""
Command-line entry point: run, reference and evaluate.
"""

import argparse
import json
import logging
import math
import os
import signal
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from dotenv import load_dotenv

from .exceptions import CompatibilityError, ConfigError, DivergenceError, MfgError, UsageError
from .metrics import control_profile, evaluate, mean_comparison, optimal_cost, sample_test_points, value_landscape
from .models import RunConfig, load_config
from .problem import make_problem
from .reference import export_table, solve_reference
from .trainer import (HISTORY_COLUMNS, PolicyIterationTrainer, ensemble_stats, evaluation_points, restore)

logger = logging.getLogger(__name__)

THREADS_ENV = "REGEN_MFG_NUM_THREADS"


def setup_logging(output_dir: Optional[Path] = None, level: str = "INFO") -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(output_dir / "run.log"))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def configure_threads() -> None:
    load_dotenv()
    threads = os.getenv(THREADS_ENV)
    if threads:
        try:
            torch.set_num_threads(int(threads))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got '{threads}'", field=THREADS_ENV)
        logger.info(f"Using {threads} torch threads")
    torch.use_deterministic_algorithms(True, warn_only=True)


def _finite_or_none(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _write_table(path: Path, rows: np.ndarray, columns: List[str]) -> None:
    np.savetxt(path, rows, delimiter=",", header=",".join(columns), comments="", fmt="%.10e")


class RunCommand:
    def __init__(self, config: RunConfig, output_dir: Path):
        self.config = config
        self.output_dir = output_dir
        self.trainer: Optional[PolicyIterationTrainer] = None
        signal.signal(signal.SIGINT, self.signal_handler)
        signal.signal(signal.SIGTERM, self.signal_handler)

    def signal_handler(self, signum, frame):
        """Handle shutdown signals"""
        logger.info(f"Received signal {signum}, stopping after the current iteration...")
        if self.trainer is not None:
            self.trainer.request_stop()

    def execute(self) -> Dict:
        config, out = self.config, self.output_dir
        (out / "config.resolved.cfg").write_text(config.to_ini())
        problem = make_problem(config.variant, config.d, config.N, config.constants)
        reference = solve_reference(problem, config.reference) if problem.has_reference() else None
        if reference is not None:
            export_table(reference, out / "reference.csv")

        self.trainer = PolicyIterationTrainer(problem, config, reference, out)
        result = self.trainer.run()
        final = result.history[-1]

        summary = {
            "variant": config.variant,
            "d": config.d,
            "seed": config.seed,
            "iterations_completed": final.iteration,
            "stopped_early": result.stopped_early,
            "final": {c: _finite_or_none(getattr(final, c)) for c in HISTORY_COLUMNS},
            "parameter_hash": self.trainer.parameter_hashes(),
            "checkpoint": str(result.final_checkpoint),
        }
        if reference is not None:
            points = self.trainer.points
            summary["J_star"] = optimal_cost(reference, points.rc)
            stats = ensemble_stats(problem, result.ensemble, config.trainer.kernel_cap)
            d = problem.d
            _write_table(out / "control_profile.csv", control_profile(result.control, reference),
                         ["t", "s", "u_learned", "u_exact"])
            _write_table(out / "value_landscape.csv", value_landscape(result.value, reference, stats),
                         ["t", "s", "v_learned", "abs_error"])
            _write_table(out / "mean_comparison.csv", mean_comparison(stats, reference),
                         ["t"] + [f"m_emp{k + 1}" for k in range(d)] + [f"m_ref{k + 1}" for k in range(d)])
        with open(out / "summary.json", "w") as f:
            json.dump(summary, f, indent=2)
        logger.info(f"Run finished: {json.dumps(summary['final'])}")
        return summary


def run(args: argparse.Namespace) -> int:
    config = load_config(args.config, seed=args.seed)
    output_dir = Path(args.output_dir or config.output_dir)
    setup_logging(output_dir, args.log_level)
    configure_threads()
    RunCommand(config, output_dir).execute()
    return 0


def reference(args: argparse.Namespace) -> int:
    setup_logging(None, args.log_level)
    problem = make_problem(args.variant, args.d)
    if not problem.has_reference():
        raise UsageError(f"variant '{args.variant}' has no reference solution")
    evaluator = solve_reference(problem)
    path = export_table(evaluator, args.output)
    points = sample_test_points(problem.d, problem.initial_half_width, args.seed)
    report = {"variant": args.variant, "d": args.d, "seed": args.seed,
              "J_star": optimal_cost(evaluator, points.rc), "table": str(path)}
    with open(Path(path).with_suffix(".json"), "w") as f:
        json.dump(report, f, indent=2)
    logger.info(f"Reference table written to {path}")
    print(json.dumps(report))
    return 0


def _resolve_checkpoint(path: Path) -> Path:
    for candidate in (path, path / "final.pt", path / "checkpoints" / "final.pt"):
        if candidate.is_file():
            return candidate
    raise CompatibilityError(f"no checkpoint found at {path}")


def evaluate_checkpoint(args: argparse.Namespace) -> int:
    setup_logging(None, args.log_level)
    run_dir = Path(args.checkpoint)
    config_path = Path(args.config) if args.config else run_dir / "config.resolved.cfg"
    config = load_config(config_path)
    if args.metric_seed is not None:
        config.metrics = config.metrics.model_copy(update={"metric_seed": args.metric_seed})
    checkpoint = _resolve_checkpoint(run_dir)

    problem = make_problem(config.variant, config.d, config.N, config.constants)
    reference_solution = solve_reference(problem, config.reference) if problem.has_reference() else None
    nets, ensemble, payload = restore(problem, config, checkpoint)
    stats = ensemble_stats(problem, ensemble, config.trainer.kernel_cap)
    values = evaluate(problem, nets.control, nets.value, stats, evaluation_points(problem, config),
                      reference_solution, config.metrics.paths, config.seed, config.metrics.reference_mean)
    report = {"checkpoint": str(checkpoint), "iteration": payload["iteration"],
              **{k: _finite_or_none(v) for k, v in values.items()}}
    print(json.dumps(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regen-mfg",
                                     description="Regenerative deep policy iteration for mean-field games")
    parser.add_argument("--log-level", default="INFO", help="Logging level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="Train on a configuration file")
    p_run.add_argument("config", help="Path to a .cfg file")
    p_run.add_argument("--seed", type=int, default=None, help="Override the configured seed")
    p_run.add_argument("--output-dir", default=None, help="Override the configured output directory")
    p_run.set_defaults(handler=run)

    p_ref = sub.add_parser("reference", help="Solve and export a reference solution")
    p_ref.add_argument("variant")
    p_ref.add_argument("d", type=int)
    p_ref.add_argument("output", help="Path of the exported table")
    p_ref.add_argument("--seed", type=int, default=0, help="Seed of the D_rc points for J*")
    p_ref.set_defaults(handler=reference)

    p_eval = sub.add_parser("evaluate", help="Recompute metrics from a checkpoint")
    p_eval.add_argument("checkpoint", help="Run directory, checkpoint directory or checkpoint file")
    p_eval.add_argument("--config", default=None, help="Config file (default: <dir>/config.resolved.cfg)")
    p_eval.add_argument("--metric-seed", type=int, default=None, help="Resample the test point sets")
    p_eval.set_defaults(handler=evaluate_checkpoint)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, UsageError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CompatibilityError as e:
        logger.error(f"CompatibilityError: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        logger.error(f"DivergenceError: {e} (last checkpoint: {e.checkpoint})")
        print(f"error: {e} (last checkpoint: {e.checkpoint})", file=sys.stderr)
        return 4
    except MfgError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
