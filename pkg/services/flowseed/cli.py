"""
Command-line entry point: dataset generation, training, benchmarking, planning and plots.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from bench import (
    DEFAULT_BUDGETS,
    STRATEGY_NAMES,
    aggregate,
    evaluate,
    make_seeds,
    make_strategy,
    problem_stream,
    write_csv,
    write_records,
)
from dataset import SplitSpec, generate_dataset, load_split, unique_problems
from errors import ConfigurationError, FlowSeedError, InputError
from flowmatch import TrainingExample, train_model
from fm_model import ModelConfig, VelocityFieldModel
from jobs import JobManager
from logging_utils import Stage
from paths import SPLITS, WorkspacePaths
from selftest import run_selftest
from settings import get_settings
from svg_plot import case_study_plot, expert_plot
from trajopt import solve_batch

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class FlowSeedArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors here exit with 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def _name_list(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def build_parser() -> FlowSeedArgumentParser:
    settings = get_settings()
    parser = FlowSeedArgumentParser(prog="flowseed", description="Flow-matching trajectory seeds for a planar arm")
    parser.add_argument("--workspace", type=Path, default=None, help="Directory for job logs and plots (default DATA_DIR)")
    sub = parser.add_subparsers(dest="command", parser_class=FlowSeedArgumentParser)

    p = sub.add_parser("gen-data", help="Generate a dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=settings.SEED)
    p.add_argument("--train", type=int, default=None, help="Number of train problems")
    p.add_argument("--val-seen", type=int, default=None)
    p.add_argument("--val-unseen", type=int, default=None)
    p.add_argument("--train-cameras", type=int, default=None)
    p.add_argument("--n-points", type=int, default=None)
    p.add_argument("--n-waypoints", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("train", help="Train the velocity-field model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Checkpoint directory")
    p.add_argument("--steps", type=int, default=settings.TRAIN_STEPS)
    p.add_argument("--batch-size", type=int, default=settings.BATCH_SIZE)
    p.add_argument("--lr", type=float, default=settings.LEARNING_RATE)
    p.add_argument("--seed", type=int, default=settings.SEED)
    p.add_argument("--tiny", action="store_true", help="Use the smallest model configuration")
    p.add_argument("--no-validate", action="store_true", help="Skip re-validating stored records")

    p = sub.add_parser("eval", help="Benchmark seed strategies")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, default=None)
    p.add_argument("--strategies", type=_name_list, default=list(STRATEGY_NAMES))
    p.add_argument("--budgets", type=_int_list, default=list(DEFAULT_BUDGETS))
    p.add_argument("--splits", type=_name_list, default=["val-seen", "val-unseen"])
    p.add_argument("--group-by", choices=("split", "family"), default="split")
    p.add_argument("--n-seeds", type=int, default=None)
    p.add_argument("--limit", type=int, default=None, help="Evaluate at most this many problems per split")
    p.add_argument("--out", type=Path, required=True, help="CSV path")
    p.add_argument("--seed", type=int, default=settings.SEED)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--no-reference", action="store_true", help="Omit published reference rows")

    p = sub.add_parser("plan", help="Plan one stored problem and draw seeds against optimized trajectories")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--problem-id", required=True)
    p.add_argument("--split", choices=SPLITS, default="val-seen")
    p.add_argument("--strategy", default="fm-2step")
    p.add_argument("--budget", type=int, default=25)
    p.add_argument("--ckpt", type=Path, default=None)
    p.add_argument("--n-seeds", type=int, default=None)
    p.add_argument("--svg", type=Path, default=None)
    p.add_argument("--seed", type=int, default=settings.SEED)

    p = sub.add_parser("plot", help="Draw a stored problem with its expert trajectory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--problem-id", required=True)
    p.add_argument("--split", choices=SPLITS, default="val-seen")
    p.add_argument("--out", type=Path, default=None)

    sub.add_parser("selftest", help="Run the in-process oracle checks")
    return parser


# ----------------------------------------------------------------------
# Subcommands: func(job, logger, args)
# ----------------------------------------------------------------------
def _gen_data(job, logger, args):
    spec = SplitSpec()
    counts = dict(spec.counts)
    for split, value in (("train", args.train), ("val-seen", args.val_seen), ("val-unseen", args.val_unseen)):
        if value is not None:
            counts[split] = value
    cameras = dict(spec.cameras)
    if args.train_cameras is not None:
        cameras["train"] = args.train_cameras
    updates = {"counts": counts, "cameras": cameras}
    if args.n_points is not None:
        updates["n_points"] = args.n_points
    if args.n_waypoints is not None:
        updates["n_waypoints"] = args.n_waypoints
    spec = SplitSpec(**{**spec.model_dump(), **updates})
    manifest = generate_dataset(spec, args.out, args.seed, max_workers=args.workers, logger=logger)
    job.artifacts.append({"type": "dataset", "path": str(args.out)})
    return manifest


def _train(job, logger, args):
    records = load_split(args.data, "train", validate=not args.no_validate)
    if not records:
        raise ConfigurationError(f"No training records in {args.data}")
    n_waypoints = records[0].n_waypoints
    config = ModelConfig.tiny(n_waypoints=n_waypoints) if args.tiny else ModelConfig(n_waypoints=n_waypoints)
    rng = np.random.default_rng(args.seed)
    model = VelocityFieldModel.initialize(config, rng)
    examples = [TrainingExample.from_trajectory(r.condition(), r.expert_trajectory(), model) for r in records]
    logger.info(
        Stage.TRAIN,
        f"Training on {len(examples)} records, {model.store.num_parameters()} parameters",
        details=config.model_dump(),
    )
    settings = get_settings()
    losses = train_model(
        model, examples, args.steps, args.batch_size, args.lr, rng,
        warmup_fraction=settings.WARMUP_FRACTION, logger=logger, ckpt_dir=args.out,
        checkpoint_every=settings.CHECKPOINT_EVERY, log_every=settings.LOG_EVERY,
    )
    job.artifacts.append({"type": "checkpoint", "path": str(args.out)})
    return losses


def _load_model(ckpt: Optional[Path], strategies) -> Optional[VelocityFieldModel]:
    if not any(s.needs_model for s in strategies):
        return None
    if ckpt is None:
        raise ConfigurationError("Strategies " + ", ".join(s.name for s in strategies if s.needs_model) + " need --ckpt")
    return VelocityFieldModel.load(ckpt)


def _eval(job, logger, args):
    strategies = [make_strategy(name, args.n_seeds) for name in args.strategies]
    if any(b < 0 for b in args.budgets) or not args.budgets:
        raise InputError(f"Budgets must be non-negative integers, got {args.budgets}")
    for split in args.splits:
        if split not in SPLITS:
            raise InputError(f"Unknown split: {split}")
    model = _load_model(args.ckpt, strategies)

    problems = []
    for split in args.splits:
        records = unique_problems(load_split(args.data, split))
        problems.extend(records[: args.limit] if args.limit is not None else records)
    logger.info(Stage.EVAL, f"Evaluating {len(problems)} problems x {len(strategies)} strategies")

    results = evaluate(problems, strategies, args.budgets, args.seed, model=model, max_workers=args.workers, logger=logger)
    rows = aggregate(
        results, group_by=args.group_by,
        groups=args.splits if args.group_by == "split" else None,
        strategies=[s.name for s in strategies], budgets=args.budgets,
        include_reference=not args.no_reference,
    )
    csv_path = write_csv(rows, args.out)
    records_path = write_records(results, Path(args.out).with_suffix(".records.jsonl"))
    job.artifacts.extend([
        {"type": "report", "path": str(csv_path)},
        {"type": "records", "path": str(records_path)},
    ])
    return rows


def _find_problem(data: Path, split: str, problem_id: str):
    for record in unique_problems(load_split(data, split)):
        if record.problem_id == problem_id:
            return record
    raise InputError(f"Problem {problem_id} not found in split {split}")


def _plan(job, logger, args, workspace):
    strategy = make_strategy(args.strategy, args.n_seeds)
    model = _load_model(args.ckpt, [strategy])
    record = _find_problem(args.data, args.split, args.problem_id)
    rng = problem_stream(args.seed, record.problem_id)
    seeds = make_seeds(record, strategy, rng, model)
    results = solve_batch(seeds, record.opt_problem(), args.budget, rng=rng, max_workers=1)
    best = min(results, key=lambda r: r.cost)
    logger.info(
        Stage.PLAN,
        f"{record.problem_id}: best cost {best.cost:.4f} after {best.iterations} iterations",
        details={"costs": [r.cost for r in results], "errors": [r.error for r in results if r.error]},
    )
    svg = args.svg or workspace.get_plot_path(record.problem_id, f"-{strategy.name}")
    case_study_plot(record, seeds, [r.trajectory for r in results], svg)
    job.artifacts.append({"type": "plot", "path": str(svg)})
    return results


def _plot(job, logger, args, workspace):
    record = _find_problem(args.data, args.split, args.problem_id)
    out = args.out or workspace.get_plot_path(record.problem_id, "-expert")
    expert_plot(record, out)
    logger.info(Stage.PLOT, f"Wrote {out}")
    job.artifacts.append({"type": "plot", "path": str(out)})
    return out


def _selftest(job, logger, args):
    results = run_selftest(logger)
    failed = [r for r in results if not r.passed]
    if failed:
        raise FlowSeedError(f"{len(failed)} of {len(results)} self-checks failed: " + ", ".join(r.name for r in failed))
    return results


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        manager = JobManager(WorkspacePaths(args.workspace))
        job = manager.create_job(args.command, options={k: str(v) for k, v in vars(args).items()})
        handlers = {
            "gen-data": (_gen_data, ()),
            "train": (_train, ()),
            "eval": (_eval, ()),
            "plan": (_plan, (manager.workspace,)),
            "plot": (_plot, (manager.workspace,)),
            "selftest": (_selftest, ()),
        }
        func, extra = handlers[args.command]
        manager.run_job(job.id, func, args, *extra)
    except (FlowSeedError, ValidationError, OSError) as e:
        print(f"flowseed {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        print(f"flowseed {args.command}: unexpected {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(cli_main())
